#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "picogen/midi_core.hpp"

namespace picogen {

enum class ChordQuality : uint8_t { Maj, Min, Dim, Aug, Sus2, Sus4, Dom7, Maj7, Min7, None };

constexpr int kNumChordQualities = 9;   // excluding None
constexpr int kNumChordCodes = 109;     // 12 roots x 9 qualities + None

struct ChordLabel {
    int root = -1;  // pitch class 0..11, -1 iff quality == None
    ChordQuality quality = ChordQuality::None;

    bool is_none() const { return quality == ChordQuality::None; }
    auto operator<=>(const ChordLabel&) const = default;
};

// Dense code used by the token vocabulary: root*9 + quality, 108 = None.
int chord_to_code(const ChordLabel& c);
ChordLabel chord_from_code(int code);

std::string chord_to_string(const ChordLabel& c);  // "C:maj", "NONE", ...

const std::vector<int>& chord_template(ChordQuality q);  // pitch classes relative to root
std::string_view quality_name(ChordQuality q);
std::optional<ChordQuality> quality_from_name(std::string_view name);
std::optional<int> pitch_class_from_name(std::string_view name);  // "C".."B", sharps/flats
std::string_view pitch_class_name(int pc);

struct LeadSheetBar {
    std::vector<NoteEvent> melody;        // monophonic
    std::array<ChordLabel, 2> chords{};   // one per half bar

    bool operator==(const LeadSheetBar&) const = default;
};

struct LeadSheet {
    double tempo_bpm = 120.0;
    std::vector<LeadSheetBar> bars;

    bool operator==(const LeadSheet&) const = default;
};

class SchemaError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Highest onset pitch per position, overlaps resolved by truncating the earlier note.
std::vector<std::vector<NoteEvent>> skyline_melody(const std::vector<Bar>& bars);

// Duration-weighted template matching per half bar; notes held across
// boundaries contribute their overlapping mass.
std::vector<std::array<ChordLabel, 2>> recognize_chords(const std::vector<Bar>& bars);

LeadSheet derive_leadsheet(const std::vector<Bar>& bars, const TimeGrid& grid);

LeadSheet load_leadsheet(std::string_view json_text);
std::string save_leadsheet(const LeadSheet& ls);

}  // namespace picogen
