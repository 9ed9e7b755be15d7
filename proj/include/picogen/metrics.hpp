#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "picogen/midi_core.hpp"

namespace picogen {

class MetricError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// The metric has no defined value on this input (e.g. an all-unvoiced
// reference); distinct from malformed input data.
class UndefinedMetricError : public MetricError {
public:
    using MetricError::MetricError;
};

struct F0Contour {
    double hop_seconds = 0.01;
    std::vector<double> frames;  // f0 in Hz; <= 0 means unvoiced
};

struct McaReport {
    double mca = 0.0;
    int64_t voiced_frames = 0;
    int64_t matched_frames = 0;
};

inline constexpr int kUnvoiced = -1;

// Frame-wise highest sounding pitch over the grid's span; kUnvoiced when silent.
std::vector<int> top_line(const std::vector<NoteEvent>& notes, const TimeGrid& grid,
                          double hop_seconds);

// Raw chroma accuracy on reference-voiced frames: a frame matches when the
// estimate is voiced and the pitch-class distance (folded into [0,6]) is
// within half a semitone; octave errors are forgiven.
McaReport mca(const std::vector<int>& estimate, const F0Contour& reference);

F0Contour load_f0_csv(std::string_view text);
std::string save_f0_csv(const F0Contour& contour);

// Synthesizes a contour from a semitone-per-frame track (test/debug helper).
F0Contour contour_from_semitones(const std::vector<int>& semitones, double hop_seconds);

}  // namespace picogen
