#include "picogen/metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <sstream>

namespace picogen {

std::vector<int> top_line(const std::vector<NoteEvent>& notes, const TimeGrid& grid,
                          double hop_seconds) {
    if (hop_seconds <= 0) throw MetricError("hop_seconds must be positive");
    double sps = grid.seconds_per_step();
    int total_steps = grid.num_bars * TimeGrid::kStepsPerBar;
    for (const auto& n : notes) {
        total_steps = std::max(total_steps,
                               n.bar * TimeGrid::kStepsPerBar + n.position + n.duration);
    }
    double total_seconds = total_steps * sps;
    int num_frames = static_cast<int>(std::ceil(total_seconds / hop_seconds));

    // Sweep note boundaries instead of scanning all notes per frame.
    struct Edge {
        double time;
        int pitch;
        bool on;
    };
    std::vector<Edge> edges;
    edges.reserve(notes.size() * 2);
    for (const auto& n : notes) {
        double on = (n.bar * TimeGrid::kStepsPerBar + n.position) * sps;
        edges.push_back({on, n.pitch, true});
        edges.push_back({on + n.duration * sps, n.pitch, false});
    }
    std::sort(edges.begin(), edges.end(),
              [](const Edge& a, const Edge& b) { return a.time < b.time; });

    std::vector<int> out(num_frames, kUnvoiced);
    std::array<int, 128> sounding{};  // count per pitch
    size_t e = 0;
    int high = kUnvoiced;
    for (int i = 0; i < num_frames; ++i) {
        double t = i * hop_seconds;
        // Notes sound over [onset, offset): offs at time t apply before ons? No:
        // an off exactly at t ends the note (half-open), an on at t starts it.
        while (e < edges.size() && edges[e].time <= t) {
            sounding[edges[e].pitch] += edges[e].on ? 1 : -1;
            ++e;
        }
        high = kUnvoiced;
        for (int p = 127; p >= 0; --p) {
            if (sounding[p] > 0) {
                high = p;
                break;
            }
        }
        out[i] = high;
    }
    return out;
}

McaReport mca(const std::vector<int>& estimate, const F0Contour& reference) {
    if (reference.hop_seconds <= 0) throw MetricError("reference hop must be positive");
    size_t n = std::min(estimate.size(), reference.frames.size());
    McaReport r;
    for (size_t i = 0; i < n; ++i) {
        double f0 = reference.frames[i];
        if (f0 <= 0) continue;
        ++r.voiced_frames;
        if (estimate[i] == kUnvoiced) continue;
        double ref_semi = 69.0 + 12.0 * std::log2(f0 / 440.0);
        double d = std::fabs(double(estimate[i]) - ref_semi);
        d = std::fmod(d, 12.0);
        d = std::min(d, 12.0 - d);
        if (d <= 0.5) ++r.matched_frames;
    }
    if (r.voiced_frames == 0) {
        throw UndefinedMetricError("MCA undefined: reference has no voiced frames");
    }
    r.mca = double(r.matched_frames) / double(r.voiced_frames);
    return r;
}

F0Contour load_f0_csv(std::string_view text) {
    std::istringstream in{std::string(text)};
    std::string line;
    if (!std::getline(in, line)) throw MetricError("empty f0 file");
    // tolerate a UTF-8 BOM and trailing CR
    if (line.size() >= 3 && line.compare(0, 3, "\xef\xbb\xbf") == 0) line.erase(0, 3);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != "time_sec,f0_hz") {
        throw MetricError("f0 file must start with header 'time_sec,f0_hz'");
    }
    std::vector<double> times;
    F0Contour c;
    size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        auto comma = line.find(',');
        if (comma == std::string::npos) {
            throw MetricError("f0 file line " + std::to_string(lineno) + ": missing comma");
        }
        try {
            times.push_back(std::stod(line.substr(0, comma)));
            c.frames.push_back(std::stod(line.substr(comma + 1)));
        } catch (const std::exception&) {
            throw MetricError("f0 file line " + std::to_string(lineno) + ": bad number");
        }
    }
    if (c.frames.empty()) throw MetricError("f0 file has no frames");
    if (times.size() >= 2) {
        double hop = times[1] - times[0];
        if (hop <= 0) throw MetricError("f0 file times must increase");
        for (size_t i = 1; i < times.size(); ++i) {
            double expect = times[0] + hop * double(i);
            if (std::fabs(times[i] - expect) > 1e-6 + 1e-6 * std::fabs(expect)) {
                throw MetricError("f0 file rows are not uniformly spaced (row " +
                                  std::to_string(i + 2) + ")");
            }
        }
        c.hop_seconds = hop;
    }
    return c;
}

std::string save_f0_csv(const F0Contour& contour) {
    std::ostringstream out;
    out << "time_sec,f0_hz\n";
    out.precision(10);
    for (size_t i = 0; i < contour.frames.size(); ++i) {
        out << i * contour.hop_seconds << "," << contour.frames[i] << "\n";
    }
    return out.str();
}

F0Contour contour_from_semitones(const std::vector<int>& semitones, double hop_seconds) {
    F0Contour c;
    c.hop_seconds = hop_seconds;
    c.frames.reserve(semitones.size());
    for (int s : semitones) {
        c.frames.push_back(s == kUnvoiced ? 0.0
                                          : 440.0 * std::pow(2.0, (double(s) - 69.0) / 12.0));
    }
    return c;
}

}  // namespace picogen
