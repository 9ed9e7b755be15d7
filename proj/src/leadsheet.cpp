#include "picogen/leadsheet.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <json.hpp>

namespace picogen {

namespace {

// Quality order doubles as the tie-break order.
constexpr std::string_view kQualityNames[kNumChordQualities] = {
    "maj", "min", "dim", "aug", "sus2", "sus4", "dom7", "maj7", "min7"};

const std::vector<int> kTemplates[kNumChordQualities] = {
    {0, 4, 7},      // maj
    {0, 3, 7},      // min
    {0, 3, 6},      // dim
    {0, 4, 8},      // aug
    {0, 2, 7},      // sus2
    {0, 5, 7},      // sus4
    {0, 4, 7, 10},  // dom7
    {0, 4, 7, 11},  // maj7
    {0, 3, 7, 10},  // min7
};

constexpr std::string_view kPitchClassNames[12] = {"C",  "C#", "D",  "D#", "E",  "F",
                                                   "F#", "G",  "G#", "A",  "A#", "B"};

}  // namespace

int chord_to_code(const ChordLabel& c) {
    if (c.is_none()) return kNumChordCodes - 1;
    return c.root * kNumChordQualities + static_cast<int>(c.quality);
}

ChordLabel chord_from_code(int code) {
    if (code < 0 || code >= kNumChordCodes) throw std::out_of_range("chord code out of range");
    if (code == kNumChordCodes - 1) return ChordLabel{};
    return ChordLabel{code / kNumChordQualities,
                      static_cast<ChordQuality>(code % kNumChordQualities)};
}

std::string chord_to_string(const ChordLabel& c) {
    if (c.is_none()) return "NONE";
    return std::string(kPitchClassNames[c.root]) + ":" +
           std::string(kQualityNames[static_cast<int>(c.quality)]);
}

const std::vector<int>& chord_template(ChordQuality q) {
    return kTemplates[static_cast<int>(q)];
}

std::string_view quality_name(ChordQuality q) {
    return kQualityNames[static_cast<int>(q)];
}

std::optional<ChordQuality> quality_from_name(std::string_view name) {
    for (int i = 0; i < kNumChordQualities; ++i) {
        if (kQualityNames[i] == name) return static_cast<ChordQuality>(i);
    }
    return std::nullopt;
}

std::optional<int> pitch_class_from_name(std::string_view name) {
    for (int i = 0; i < 12; ++i) {
        if (kPitchClassNames[i] == name) return i;
    }
    if (name == "Db") return 1;
    if (name == "Eb") return 3;
    if (name == "Gb") return 6;
    if (name == "Ab") return 8;
    if (name == "Bb") return 10;
    return std::nullopt;
}

std::string_view pitch_class_name(int pc) {
    return kPitchClassNames[((pc % 12) + 12) % 12];
}

std::vector<std::vector<NoteEvent>> skyline_melody(const std::vector<Bar>& bars) {
    std::vector<NoteEvent> selected;
    for (const auto& bar : bars) {
        // One winner per occupied position: highest pitch, longest, loudest.
        for (size_t i = 0; i < bar.size();) {
            size_t j = i;
            NoteEvent best = bar[i];
            while (j < bar.size() && bar[j].position == bar[i].position) {
                const NoteEvent& n = bar[j];
                if (std::tie(n.pitch, n.duration, n.velocity) >
                    std::tie(best.pitch, best.duration, best.velocity)) {
                    best = n;
                }
                ++j;
            }
            selected.push_back(best);
            i = j;
        }
    }
    for (size_t i = 0; i + 1 < selected.size(); ++i) {
        int64_t onset = int64_t(selected[i].bar) * TimeGrid::kStepsPerBar + selected[i].position;
        int64_t next = int64_t(selected[i + 1].bar) * TimeGrid::kStepsPerBar +
                       selected[i + 1].position;
        if (onset + selected[i].duration > next) {
            selected[i].duration = static_cast<int>(next - onset);
        }
    }

    std::vector<std::vector<NoteEvent>> out(bars.size());
    for (const auto& n : selected) out[n.bar].push_back(n);
    return out;
}

namespace {

// Score in tenths so ties are exact integer comparisons:
// 10 * (mass on template) - 3 * (mass off template).
int64_t score_template10(const std::array<int64_t, 12>& hist, int root, ChordQuality q) {
    bool on_template[12] = {};
    for (int pc : chord_template(q)) on_template[(root + pc) % 12] = true;
    int64_t on = 0;
    int64_t off = 0;
    for (int pc = 0; pc < 12; ++pc) (on_template[pc] ? on : off) += hist[pc];
    return 10 * on - 3 * off;
}

ChordLabel best_chord(const std::array<int64_t, 12>& hist, const ChordLabel& prev) {
    int64_t total = 0;
    for (int64_t m : hist) total += m;
    if (total == 0) return ChordLabel{};

    int64_t best = INT64_MIN;
    for (int root = 0; root < 12; ++root) {
        for (int q = 0; q < kNumChordQualities; ++q) {
            best = std::max(best, score_template10(hist, root, static_cast<ChordQuality>(q)));
        }
    }
    if (!prev.is_none() && score_template10(hist, prev.root, prev.quality) == best) return prev;
    for (int root = 0; root < 12; ++root) {
        for (int q = 0; q < kNumChordQualities; ++q) {
            if (score_template10(hist, root, static_cast<ChordQuality>(q)) == best) {
                return ChordLabel{root, static_cast<ChordQuality>(q)};
            }
        }
    }
    return ChordLabel{};
}

}  // namespace

std::vector<std::array<ChordLabel, 2>> recognize_chords(const std::vector<Bar>& bars) {
    std::vector<std::array<ChordLabel, 2>> out(bars.size());
    ChordLabel prev;
    for (size_t b = 0; b < bars.size(); ++b) {
        for (int half = 0; half < 2; ++half) {
            int64_t wbeg = int64_t(b) * TimeGrid::kStepsPerBar + half * 8;
            int64_t wend = wbeg + 8;
            std::array<int64_t, 12> hist{};
            // Durations cap at 32 steps, so lookback of two bars suffices.
            size_t from = b >= 2 ? b - 2 : 0;
            for (size_t k = from; k <= b; ++k) {
                for (const auto& n : bars[k]) {
                    int64_t on = int64_t(n.bar) * TimeGrid::kStepsPerBar + n.position;
                    int64_t overlap = std::min(on + n.duration, wend) - std::max(on, wbeg);
                    if (overlap > 0) hist[n.pitch % 12] += overlap;
                }
            }
            out[b][half] = best_chord(hist, prev);
            prev = out[b][half];
        }
    }
    return out;
}

LeadSheet derive_leadsheet(const std::vector<Bar>& bars, const TimeGrid& grid) {
    LeadSheet ls;
    ls.tempo_bpm = clamp_tempo(grid.tempo_bpm);
    auto melody = skyline_melody(bars);
    auto chords = recognize_chords(bars);
    ls.bars.resize(bars.size());
    for (size_t b = 0; b < bars.size(); ++b) {
        ls.bars[b].melody = std::move(melody[b]);
        ls.bars[b].chords = chords[b];
    }
    return ls;
}

namespace {

using nlohmann::json;

[[noreturn]] void schema_fail(const std::string& path, const std::string& what) {
    throw SchemaError("lead sheet schema violation at " + path + ": " + what);
}

int require_int(const json& j, const std::string& path, int lo, int hi) {
    if (!j.is_number_integer()) schema_fail(path, "expected an integer");
    int v = j.get<int>();
    if (v < lo || v > hi) {
        schema_fail(path, "value " + std::to_string(v) + " outside [" + std::to_string(lo) +
                              "," + std::to_string(hi) + "]");
    }
    return v;
}

ChordLabel parse_chord(const json& j, const std::string& path) {
    if (!j.is_object()) schema_fail(path, "expected an object");
    if (!j.contains("root") || !j.contains("quality")) {
        schema_fail(path, "missing root or quality");
    }
    const json& root = j.at("root");
    const json& quality = j.at("quality");
    if (root.is_null() && quality.is_null()) return ChordLabel{};
    if (root.is_null() != quality.is_null()) {
        std::cerr << "warning: " << path << ": half-specified chord mapped to NONE\n";
        return ChordLabel{};
    }
    if (!root.is_string()) schema_fail(path + ".root", "expected a string or null");
    if (!quality.is_string()) schema_fail(path + ".quality", "expected a string or null");
    auto pc = pitch_class_from_name(root.get<std::string>());
    if (!pc) schema_fail(path + ".root", "unknown root '" + root.get<std::string>() + "'");
    auto q = quality_from_name(quality.get<std::string>());
    if (!q) {
        std::cerr << "warning: " << path << ": unknown quality '" << quality.get<std::string>()
                  << "' mapped to NONE\n";
        return ChordLabel{};
    }
    return ChordLabel{*pc, *q};
}

}  // namespace

LeadSheet load_leadsheet(std::string_view json_text) {
    json doc;
    try {
        doc = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw SchemaError(std::string("lead sheet is not valid JSON: ") + e.what());
    }
    if (!doc.is_object()) schema_fail("$", "expected a JSON object");
    if (!doc.contains("tempo_bpm") || !doc.at("tempo_bpm").is_number()) {
        schema_fail("$.tempo_bpm", "expected a number");
    }
    LeadSheet ls;
    double bpm = doc.at("tempo_bpm").get<double>();
    ls.tempo_bpm = clamp_tempo(bpm);
    if (ls.tempo_bpm != bpm) {
        std::cerr << "warning: tempo_bpm " << bpm << " clamped to " << ls.tempo_bpm << "\n";
    }
    if (!doc.contains("bars") || !doc.at("bars").is_array()) {
        schema_fail("$.bars", "expected an array");
    }

    int bar_idx = 0;
    for (const json& jbar : doc.at("bars")) {
        std::string bpath = "$.bars[" + std::to_string(bar_idx) + "]";
        if (!jbar.is_object()) schema_fail(bpath, "expected an object");
        LeadSheetBar bar;
        if (!jbar.contains("melody") || !jbar.at("melody").is_array()) {
            schema_fail(bpath + ".melody", "expected an array");
        }
        int note_idx = 0;
        for (const json& jn : jbar.at("melody")) {
            std::string npath = bpath + ".melody[" + std::to_string(note_idx) + "]";
            if (!jn.is_object()) schema_fail(npath, "expected an object");
            NoteEvent n;
            n.bar = bar_idx;
            n.position = require_int(jn.value("position", json()), npath + ".position", 0, 15);
            n.duration = require_int(jn.value("duration", json()), npath + ".duration", 1,
                                     TimeGrid::kMaxDurationSteps);
            n.pitch = require_int(jn.value("pitch", json()), npath + ".pitch",
                                  TimeGrid::kMinPitch, TimeGrid::kMaxPitch);
            n.velocity = 80;  // the file format carries no velocity
            bar.melody.push_back(n);
            ++note_idx;
        }
        if (!jbar.contains("chords") || !jbar.at("chords").is_array() ||
            jbar.at("chords").size() != 2) {
            schema_fail(bpath + ".chords", "expected an array of exactly 2 chords");
        }
        for (int h = 0; h < 2; ++h) {
            bar.chords[h] =
                parse_chord(jbar.at("chords")[h], bpath + ".chords[" + std::to_string(h) + "]");
        }
        ls.bars.push_back(std::move(bar));
        ++bar_idx;
    }

    // Enforce monophony: drop same-position duplicates, truncate overlaps.
    std::vector<NoteEvent*> flat;
    for (auto& bar : ls.bars) {
        std::sort(bar.melody.begin(), bar.melody.end());
        auto dup = std::unique(bar.melody.begin(), bar.melody.end(),
                               [](const NoteEvent& a, const NoteEvent& b) {
                                   return a.position == b.position;
                               });
        if (dup != bar.melody.end()) {
            std::cerr << "warning: duplicate melody onsets dropped in a bar\n";
            bar.melody.erase(dup, bar.melody.end());
        }
        for (auto& n : bar.melody) flat.push_back(&n);
    }
    for (size_t i = 0; i + 1 < flat.size(); ++i) {
        int64_t onset = int64_t(flat[i]->bar) * TimeGrid::kStepsPerBar + flat[i]->position;
        int64_t next = int64_t(flat[i + 1]->bar) * TimeGrid::kStepsPerBar + flat[i + 1]->position;
        if (onset + flat[i]->duration > next) flat[i]->duration = static_cast<int>(next - onset);
    }
    return ls;
}

std::string save_leadsheet(const LeadSheet& ls) {
    json doc;
    doc["tempo_bpm"] = ls.tempo_bpm;
    doc["bars"] = json::array();
    for (const auto& bar : ls.bars) {
        json jbar;
        jbar["melody"] = json::array();
        for (const auto& n : bar.melody) {
            jbar["melody"].push_back(
                {{"position", n.position}, {"duration", n.duration}, {"pitch", n.pitch}});
        }
        jbar["chords"] = json::array();
        for (const auto& c : bar.chords) {
            if (c.is_none()) {
                jbar["chords"].push_back({{"root", nullptr}, {"quality", nullptr}});
            } else {
                jbar["chords"].push_back(
                    {{"root", std::string(pitch_class_name(c.root))},
                     {"quality", std::string(quality_name(c.quality))}});
            }
        }
        doc["bars"].push_back(std::move(jbar));
    }
    return doc.dump(2);
}

}  // namespace picogen
