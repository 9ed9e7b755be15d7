#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "picogen/leadsheet.hpp"
#include "picogen/midi_core.hpp"

namespace picogen {

inline constexpr int kIgnore = -1;

enum class Family : uint8_t { Spec, BarMark, Metric, Note };
enum class Side : uint8_t { Src, Tgt };

inline constexpr int kSpecBos = 0;
inline constexpr int kSpecEos = 1;
inline constexpr int kBarSrc = 0;
inline constexpr int kBarTgt = 1;

// Fixed-width record; exactly the fields of its family are non-IGNORE.
struct SuperToken {
    int spec = kIgnore;      // 0=BOS 1=EOS
    int bar = kIgnore;       // 0=SRC 1=TGT
    int position = kIgnore;  // 0..15
    int tempo = kIgnore;     // bin index 0..53
    int chord = kIgnore;     // chord code 0..108 (108 = NONE)
    int pitch = kIgnore;     // 21..108
    int duration = kIgnore;  // 1..32
    int velocity = kIgnore;  // 0..127

    bool operator==(const SuperToken&) const = default;

    static SuperToken bos() { return with_spec(kSpecBos); }
    static SuperToken eos() { return with_spec(kSpecEos); }
    static SuperToken bar_mark(int v) {
        SuperToken t;
        t.bar = v;
        return t;
    }
    static SuperToken metric(int pos, int tempo = kIgnore, int chord = kIgnore) {
        SuperToken t;
        t.position = pos;
        t.tempo = tempo;
        t.chord = chord;
        return t;
    }
    static SuperToken note(int pitch, int duration, int velocity) {
        SuperToken t;
        t.pitch = pitch;
        t.duration = duration;
        t.velocity = velocity;
        return t;
    }

private:
    static SuperToken with_spec(int v) {
        SuperToken t;
        t.spec = v;
        return t;
    }
};

// Family by field precedence: spec, then bar, then position (Metric), then
// pitch (Note). Records with none of those set have no family.
std::optional<Family> classify_family(const SuperToken& t);

// True when the non-IGNORE fields are exactly the declared family's fields
// (Metric may additionally carry tempo and chord).
bool is_wellformed(const SuperToken& t);

// Forces every field outside the classified family to IGNORE.
SuperToken sanitize_to_family(const SuperToken& t, Family f);

enum FieldIndex {
    kFSpec = 0,
    kFBar,
    kFPosition,
    kFTempo,
    kFChord,
    kFPitch,
    kFDuration,
    kFVelocity,
    kNumFields
};

using IdRecord = std::array<int, kNumFields>;

// Per-field table sizes including the reserved IGNORE id 0.
extern const std::array<int, kNumFields> kFieldSizes;
extern const std::array<const char*, kNumFields> kFieldNames;

int field_value_to_id(int field, int value);
int field_id_to_value(int field, int id);

IdRecord token_to_ids(const SuperToken& t);
SuperToken token_from_ids(const IdRecord& ids);

// 54 bins: clamp to [32,244], round to the nearest multiple of 4.
int tempo_to_bin(double bpm);
double bin_to_tempo(int bin);

class Vocab {
public:
    Vocab();

    static Vocab load(const std::string& json_text);
    std::string save() const;

    int size(int field) const { return static_cast<int>(id_to_str_[field].size()); }
    const std::string& token_string(int field, int id) const;
    int id_from_string(int field, const std::string& s) const;

private:
    std::array<std::vector<std::string>, kNumFields> id_to_str_;
    std::array<std::map<std::string, int>, kNumFields> str_to_id_;
};

struct InterleavedSequence {
    std::vector<SuperToken> tokens;
    std::vector<int> bar_index;  // -1 for BOS/EOS
    std::vector<Side> side;

    size_t size() const { return tokens.size(); }
    void push(const SuperToken& t, int bar, Side s) {
        tokens.push_back(t);
        bar_index.push_back(bar);
        side.push_back(s);
    }
};

class CodecError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

std::vector<SuperToken> encode_piano_bar(const Bar& bar, int tempo_bin, bool emit_tempo = false);

std::vector<SuperToken> encode_leadsheet_bar(const LeadSheetBar& bar, bool emit_tempo,
                                             int tempo_bin);

// Bar-wise mix [L1,S1,...,LB,SB]. With piano == nullptr emits the inference
// prompt: BOS, BAR_SRC, L1, BAR_TGT, and stops.
InterleavedSequence build_interleaved(const LeadSheet& leadsheet,
                                      const std::vector<Bar>* piano);

enum class DecodeMode { Strict, Tolerant };

struct DecodeStats {
    size_t dropped_tokens = 0;
    size_t truncated_melody = 0;
    bool incomplete_tail = false;
};

struct Decoded {
    LeadSheet leadsheet;
    std::vector<Bar> piano;
    DecodeStats stats;
};

Decoded decode(std::span<const SuperToken> tokens, DecodeMode mode);
Decoded decode(const InterleavedSequence& seq, DecodeMode mode);

std::vector<InterleavedSequence> window(const InterleavedSequence& seq, int max_len = 1024,
                                        int stride_bars = 1);

// Flat event-stream ablation representation.
struct MidiLikeToken {
    enum class Kind : uint8_t { Velocity, NoteOn, TimeShift, NoteOff };
    Kind kind;
    int value;

    bool operator==(const MidiLikeToken&) const = default;
};

std::vector<MidiLikeToken> encode_midi_like(const std::vector<Bar>& bars);
std::vector<Bar> decode_midi_like(const std::vector<MidiLikeToken>& tokens, int num_bars = 0);
std::string midi_like_to_string(const MidiLikeToken& t);
MidiLikeToken midi_like_from_string(const std::string& s);

}  // namespace picogen
