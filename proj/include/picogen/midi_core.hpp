#pragma once

#include <compare>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace picogen {

// Raised on malformed MIDI input; message carries the byte offset when known.
class MidiError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class UnsupportedMeterError : public MidiError {
public:
    using MidiError::MidiError;
};

class EmptyInputError : public MidiError {
public:
    using MidiError::MidiError;
};

// One note as it appears in the file, before grid quantization.
struct RawNote {
    int64_t onset_ticks = 0;
    int64_t offset_ticks = 0;  // > onset_ticks
    int pitch = 0;             // MIDI number 0..127
    int velocity = 0;          // 0..127
};

// Fixed 4/4 sixteenth-note grid under a constant tempo.
struct TimeGrid {
    static constexpr int kStepsPerBar = 16;
    static constexpr int kMaxDurationSteps = 32;  // 8 quarter notes
    static constexpr int kMinPitch = 21;          // A0
    static constexpr int kMaxPitch = 108;         // C8

    int ppq = 480;             // ticks per quarter note
    double tempo_bpm = 120.0;  // clamped to [32, 244]
    int num_bars = 0;

    double ticks_per_step() const { return ppq / 4.0; }
    double seconds_per_step() const { return 60.0 / tempo_bpm / 4.0; }
};

// Member order doubles as the canonical sort key (bar, position, pitch, ...).
struct NoteEvent {
    int bar = 0;       // >= 0
    int position = 0;  // 0..15
    int pitch = 0;     // 21..108
    int duration = 1;  // 1..32 steps
    int velocity = 0;  // 0..127

    auto operator<=>(const NoteEvent&) const = default;
};

using Bar = std::vector<NoteEvent>;

struct ParsedMidi {
    std::vector<RawNote> notes;
    TimeGrid grid;
};

double clamp_tempo(double bpm);

// Rounds tick*4/ppq to the nearest sixteenth step, ties toward the earlier step.
int ticks_to_step(int64_t ticks, int ppq);

ParsedMidi parse_midi(std::span<const uint8_t> bytes);

std::vector<NoteEvent> quantize(const std::vector<RawNote>& notes, const TimeGrid& grid);

std::vector<Bar> split_bars(const std::vector<NoteEvent>& notes, const TimeGrid& grid);

std::vector<uint8_t> write_midi(const std::vector<NoteEvent>& notes, const TimeGrid& grid);

}  // namespace picogen
