#include "picogen/tokenizer.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <json.hpp>

namespace picogen {

const std::array<int, kNumFields> kFieldSizes = {
    3,    // spec: IGNORE BOS EOS
    3,    // bar: IGNORE SRC TGT
    17,   // position
    55,   // tempo bins
    110,  // chord codes incl. NONE
    89,   // pitch A0..C8
    33,   // duration
    129,  // velocity
};

const std::array<const char*, kNumFields> kFieldNames = {
    "spec", "bar", "position", "tempo", "chord", "pitch", "duration", "velocity"};

std::optional<Family> classify_family(const SuperToken& t) {
    if (t.spec != kIgnore) return Family::Spec;
    if (t.bar != kIgnore) return Family::BarMark;
    if (t.position != kIgnore) return Family::Metric;
    if (t.pitch != kIgnore) return Family::Note;
    return std::nullopt;
}

bool is_wellformed(const SuperToken& t) {
    auto fam = classify_family(t);
    if (!fam) return false;
    auto in = [](int v, int lo, int hi) { return v >= lo && v <= hi; };
    switch (*fam) {
        case Family::Spec:
            return in(t.spec, 0, 1) && t.bar == kIgnore && t.position == kIgnore &&
                   t.tempo == kIgnore && t.chord == kIgnore && t.pitch == kIgnore &&
                   t.duration == kIgnore && t.velocity == kIgnore;
        case Family::BarMark:
            return in(t.bar, 0, 1) && t.position == kIgnore && t.tempo == kIgnore &&
                   t.chord == kIgnore && t.pitch == kIgnore && t.duration == kIgnore &&
                   t.velocity == kIgnore;
        case Family::Metric:
            return in(t.position, 0, 15) &&
                   (t.tempo == kIgnore || in(t.tempo, 0, 53)) &&
                   (t.chord == kIgnore || in(t.chord, 0, kNumChordCodes - 1)) &&
                   t.pitch == kIgnore && t.duration == kIgnore && t.velocity == kIgnore;
        case Family::Note:
            return in(t.pitch, TimeGrid::kMinPitch, TimeGrid::kMaxPitch) &&
                   in(t.duration, 1, TimeGrid::kMaxDurationSteps) && in(t.velocity, 0, 127) &&
                   t.tempo == kIgnore && t.chord == kIgnore;
    }
    return false;
}

SuperToken sanitize_to_family(const SuperToken& t, Family f) {
    SuperToken out;
    switch (f) {
        case Family::Spec:
            out.spec = t.spec;
            break;
        case Family::BarMark:
            out.bar = t.bar;
            break;
        case Family::Metric:
            out.position = t.position;
            out.tempo = t.tempo;
            out.chord = t.chord;
            break;
        case Family::Note:
            out.pitch = t.pitch;
            out.duration = t.duration;
            out.velocity = t.velocity;
            break;
    }
    return out;
}

namespace {

struct FieldSpec {
    int min_value;
};

// Value offsets per field; id = value - min + 1, id 0 reserved for IGNORE.
constexpr int kFieldMin[kNumFields] = {0, 0, 0, 0, 0, TimeGrid::kMinPitch, 1, 0};

}  // namespace

int field_value_to_id(int field, int value) {
    if (value == kIgnore) return 0;
    int id = value - kFieldMin[field] + 1;
    if (id < 1 || id >= kFieldSizes[field]) {
        throw std::out_of_range(std::string(kFieldNames[field]) + " value " +
                                std::to_string(value) + " out of vocabulary");
    }
    return id;
}

int field_id_to_value(int field, int id) {
    if (id == 0) return kIgnore;
    if (id < 0 || id >= kFieldSizes[field]) {
        throw std::out_of_range(std::string(kFieldNames[field]) + " id " + std::to_string(id) +
                                " out of vocabulary");
    }
    return id - 1 + kFieldMin[field];
}

IdRecord token_to_ids(const SuperToken& t) {
    return {field_value_to_id(kFSpec, t.spec),         field_value_to_id(kFBar, t.bar),
            field_value_to_id(kFPosition, t.position), field_value_to_id(kFTempo, t.tempo),
            field_value_to_id(kFChord, t.chord),       field_value_to_id(kFPitch, t.pitch),
            field_value_to_id(kFDuration, t.duration), field_value_to_id(kFVelocity, t.velocity)};
}

SuperToken token_from_ids(const IdRecord& ids) {
    SuperToken t;
    t.spec = field_id_to_value(kFSpec, ids[kFSpec]);
    t.bar = field_id_to_value(kFBar, ids[kFBar]);
    t.position = field_id_to_value(kFPosition, ids[kFPosition]);
    t.tempo = field_id_to_value(kFTempo, ids[kFTempo]);
    t.chord = field_id_to_value(kFChord, ids[kFChord]);
    t.pitch = field_id_to_value(kFPitch, ids[kFPitch]);
    t.duration = field_id_to_value(kFDuration, ids[kFDuration]);
    t.velocity = field_id_to_value(kFVelocity, ids[kFVelocity]);
    return t;
}

int tempo_to_bin(double bpm) {
    double v = clamp_tempo(bpm);
    long k = std::lround(v / 4.0) * 4;
    k = std::clamp(k, 32l, 244l);
    return static_cast<int>((k - 32) / 4);
}

double bin_to_tempo(int bin) {
    if (bin < 0 || bin > 53) throw std::out_of_range("tempo bin out of range");
    return 32.0 + 4.0 * bin;
}

Vocab::Vocab() {
    for (int f = 0; f < kNumFields; ++f) {
        id_to_str_[f].resize(kFieldSizes[f]);
        id_to_str_[f][0] = "IGNORE";
    }
    id_to_str_[kFSpec][1] = "BOS";
    id_to_str_[kFSpec][2] = "EOS";
    id_to_str_[kFBar][1] = "SRC";
    id_to_str_[kFBar][2] = "TGT";
    for (int id = 1; id < kFieldSizes[kFPosition]; ++id) {
        id_to_str_[kFPosition][id] = std::to_string(field_id_to_value(kFPosition, id));
    }
    for (int id = 1; id < kFieldSizes[kFTempo]; ++id) {
        id_to_str_[kFTempo][id] =
            std::to_string(static_cast<int>(bin_to_tempo(field_id_to_value(kFTempo, id))));
    }
    for (int id = 1; id < kFieldSizes[kFChord]; ++id) {
        id_to_str_[kFChord][id] = chord_to_string(chord_from_code(field_id_to_value(kFChord, id)));
    }
    for (int f : {int(kFPitch), int(kFDuration), int(kFVelocity)}) {
        for (int id = 1; id < kFieldSizes[f]; ++id) {
            id_to_str_[f][id] = std::to_string(field_id_to_value(f, id));
        }
    }
    for (int f = 0; f < kNumFields; ++f) {
        for (int id = 0; id < kFieldSizes[f]; ++id) {
            str_to_id_[f][id_to_str_[f][id]] = id;
        }
    }
}

const std::string& Vocab::token_string(int field, int id) const {
    return id_to_str_.at(field).at(id);
}

int Vocab::id_from_string(int field, const std::string& s) const {
    auto it = str_to_id_[field].find(s);
    if (it == str_to_id_[field].end()) {
        throw std::out_of_range("unknown token string '" + s + "' for field " +
                                kFieldNames[field]);
    }
    return it->second;
}

std::string Vocab::save() const {
    nlohmann::json doc;
    doc["format"] = "picogen-vocab-1";
    doc["fields"] = nlohmann::json::array();
    for (int f = 0; f < kNumFields; ++f) {
        doc["fields"].push_back({{"name", kFieldNames[f]}, {"tokens", id_to_str_[f]}});
    }
    return doc.dump(2);
}

Vocab Vocab::load(const std::string& json_text) {
    nlohmann::json doc = nlohmann::json::parse(json_text);
    if (!doc.is_object() || doc.value("format", "") != "picogen-vocab-1") {
        throw std::runtime_error("not a picogen-vocab-1 file");
    }
    const auto& fields = doc.at("fields");
    if (!fields.is_array() || fields.size() != kNumFields) {
        throw std::runtime_error("vocab file has wrong field count");
    }
    Vocab v;
    for (int f = 0; f < kNumFields; ++f) {
        const auto& jf = fields[f];
        if (jf.value("name", "") != kFieldNames[f]) {
            throw std::runtime_error("vocab field order mismatch at index " + std::to_string(f));
        }
        auto tokens = jf.at("tokens").get<std::vector<std::string>>();
        if (static_cast<int>(tokens.size()) != kFieldSizes[f]) {
            throw std::runtime_error(std::string("vocab size mismatch for field ") +
                                     kFieldNames[f]);
        }
        std::map<std::string, int> rev;
        for (int id = 0; id < kFieldSizes[f]; ++id) rev[tokens[id]] = id;
        if (rev.size() != tokens.size()) {
            throw std::runtime_error(std::string("vocab mapping not bijective for field ") +
                                     kFieldNames[f]);
        }
        v.id_to_str_[f] = std::move(tokens);
        v.str_to_id_[f] = std::move(rev);
    }
    return v;
}

std::vector<SuperToken> encode_piano_bar(const Bar& bar, int tempo_bin, bool emit_tempo) {
    Bar sorted = bar;
    std::sort(sorted.begin(), sorted.end());
    std::vector<SuperToken> out;
    int cur_pos = kIgnore;
    bool first_metric = true;
    for (const auto& n : sorted) {
        if (n.position != cur_pos) {
            cur_pos = n.position;
            out.push_back(SuperToken::metric(
                cur_pos, first_metric && emit_tempo ? tempo_bin : kIgnore, kIgnore));
            first_metric = false;
        }
        out.push_back(SuperToken::note(n.pitch, n.duration, n.velocity));
    }
    return out;
}

std::vector<SuperToken> encode_leadsheet_bar(const LeadSheetBar& bar, bool emit_tempo,
                                             int tempo_bin) {
    std::vector<NoteEvent> melody = bar.melody;
    std::sort(melody.begin(), melody.end());

    std::vector<SuperToken> out;
    out.push_back(SuperToken::metric(0, emit_tempo ? tempo_bin : kIgnore,
                                     chord_to_code(bar.chords[0])));
    size_t i = 0;
    auto emit_notes_at = [&](int pos) {
        while (i < melody.size() && melody[i].position == pos) {
            out.push_back(SuperToken::note(melody[i].pitch, melody[i].duration,
                                           melody[i].velocity));
            ++i;
        }
    };
    emit_notes_at(0);
    while (i < melody.size() && melody[i].position < 8) {
        out.push_back(SuperToken::metric(melody[i].position));
        emit_notes_at(melody[i].position);
    }
    out.push_back(SuperToken::metric(8, kIgnore, chord_to_code(bar.chords[1])));
    emit_notes_at(8);
    while (i < melody.size()) {
        out.push_back(SuperToken::metric(melody[i].position));
        emit_notes_at(melody[i].position);
    }
    return out;
}

InterleavedSequence build_interleaved(const LeadSheet& leadsheet, const std::vector<Bar>* piano) {
    size_t num_bars = leadsheet.bars.size();
    if (piano) num_bars = std::max(num_bars, piano->size());

    int tempo_bin = tempo_to_bin(leadsheet.tempo_bpm);
    static const LeadSheetBar kEmptyLsBar{};
    static const Bar kEmptyBar{};

    InterleavedSequence seq;
    seq.push(SuperToken::bos(), -1, Side::Src);
    for (size_t k = 0; k < num_bars; ++k) {
        const LeadSheetBar& lb = k < leadsheet.bars.size() ? leadsheet.bars[k] : kEmptyLsBar;
        seq.push(SuperToken::bar_mark(kBarSrc), static_cast<int>(k), Side::Src);
        for (const auto& t : encode_leadsheet_bar(lb, k == 0, tempo_bin)) {
            seq.push(t, static_cast<int>(k), Side::Src);
        }
        seq.push(SuperToken::bar_mark(kBarTgt), static_cast<int>(k), Side::Tgt);
        if (!piano) return seq;  // inference prompt: stop after BAR_TGT of bar 1
        const Bar& pb = k < piano->size() ? (*piano)[k] : kEmptyBar;
        for (const auto& t : encode_piano_bar(pb, tempo_bin, false)) {
            seq.push(t, static_cast<int>(k), Side::Tgt);
        }
    }
    seq.push(SuperToken::eos(), -1, Side::Tgt);
    return seq;
}

namespace {

struct Decoder {
    DecodeMode mode;
    Decoded out;

    enum class State { Start, InSrc, InTgt } state = State::Start;
    LeadSheetBar ls_bar;
    Bar piano_bar;
    int bar = -1;
    int cur_pos = kIgnore;
    bool seen_any_metric = false;
    bool tempo_set = false;
    bool done = false;

    [[noreturn]] void fail(size_t i, const std::string& what) {
        throw CodecError("codec violation at token " + std::to_string(i) + ": " + what);
    }
    bool reject(size_t i, const std::string& what) {
        if (mode == DecodeMode::Strict) fail(i, what);
        ++out.stats.dropped_tokens;
        return false;
    }

    void finish_bar() {
        out.leadsheet.bars.push_back(std::move(ls_bar));
        out.piano.push_back(std::move(piano_bar));
        ls_bar = {};
        piano_bar = {};
    }

    void start_bar() {
        ++bar;
        state = State::InSrc;
        cur_pos = kIgnore;
    }

    void handle(size_t i, const SuperToken& t) {
        if (!is_wellformed(t)) {
            reject(i, "malformed super token");
            return;
        }
        auto fam = *classify_family(t);
        switch (fam) {
            case Family::Spec:
                if (t.spec == kSpecBos) {
                    if (i != 0) reject(i, "BOS not at sequence start");
                    return;
                }
                // EOS
                if (state == State::InTgt) {
                    finish_bar();
                    done = true;
                } else if (state == State::Start) {
                    done = true;
                } else {
                    if (reject(i, "EOS inside lead-sheet span")) return;
                }
                return;
            case Family::BarMark:
                if (t.bar == kBarSrc) {
                    if (state == State::InSrc) {
                        reject(i, "BAR_SRC without closing BAR_TGT");
                        finish_bar();  // tolerant: close with an empty piano bar
                    } else if (state == State::InTgt) {
                        finish_bar();
                    }
                    start_bar();
                } else {
                    if (state == State::InSrc) {
                        state = State::InTgt;
                        cur_pos = kIgnore;
                    } else {
                        reject(i, "BAR_TGT outside lead-sheet span");
                    }
                }
                return;
            case Family::Metric: {
                if (state == State::Start) {
                    reject(i, "METRIC before any bar");
                    return;
                }
                SuperToken m = t;
                if (m.tempo != kIgnore) {
                    if (seen_any_metric) {
                        if (mode == DecodeMode::Strict) fail(i, "tempo after the first METRIC");
                        m.tempo = kIgnore;
                    } else if (!tempo_set) {
                        out.leadsheet.tempo_bpm = bin_to_tempo(m.tempo);
                        tempo_set = true;
                    }
                }
                seen_any_metric = true;
                if (state == State::InSrc) {
                    if (m.chord != kIgnore) {
                        if (m.position == 0) {
                            ls_bar.chords[0] = chord_from_code(m.chord);
                        } else if (m.position == 8) {
                            ls_bar.chords[1] = chord_from_code(m.chord);
                        } else if (mode == DecodeMode::Strict) {
                            fail(i, "chord away from a half-bar anchor");
                        }
                    }
                } else if (m.chord != kIgnore) {
                    if (mode == DecodeMode::Strict) fail(i, "chord on the piano side");
                }
                cur_pos = m.position;
                return;
            }
            case Family::Note: {
                if (state == State::Start || cur_pos == kIgnore) {
                    reject(i, "NOTE before any METRIC in this bar");
                    return;
                }
                NoteEvent n;
                n.bar = bar;
                n.position = cur_pos;
                n.pitch = t.pitch;
                n.duration = t.duration;
                n.velocity = t.velocity;
                if (state == State::InSrc) {
                    ls_bar.melody.push_back(n);
                } else {
                    piano_bar.push_back(n);
                }
                return;
            }
        }
    }
};

}  // namespace

Decoded decode(std::span<const SuperToken> tokens, DecodeMode mode) {
    Decoder d{mode};
    for (size_t i = 0; i < tokens.size() && !d.done; ++i) d.handle(i, tokens[i]);
    if (!d.done) {
        d.out.stats.incomplete_tail = true;  // open bar dropped: only complete bars decode
    }

    // Canonicalize and enforce melody monophony across the whole piece.
    for (auto& b : d.out.piano) std::sort(b.begin(), b.end());
    std::vector<NoteEvent*> flat;
    for (auto& lsb : d.out.leadsheet.bars) {
        std::sort(lsb.melody.begin(), lsb.melody.end());
        auto dup = std::unique(lsb.melody.begin(), lsb.melody.end(),
                               [](const NoteEvent& a, const NoteEvent& b) {
                                   return a.position == b.position;
                               });
        if (dup != lsb.melody.end()) {
            if (mode == DecodeMode::Strict) {
                throw CodecError("codec violation: duplicate melody onsets in a bar");
            }
            d.out.stats.truncated_melody += std::distance(dup, lsb.melody.end());
            lsb.melody.erase(dup, lsb.melody.end());
        }
        for (auto& n : lsb.melody) flat.push_back(&n);
    }
    for (size_t i = 0; i + 1 < flat.size(); ++i) {
        int64_t on = int64_t(flat[i]->bar) * TimeGrid::kStepsPerBar + flat[i]->position;
        int64_t next = int64_t(flat[i + 1]->bar) * TimeGrid::kStepsPerBar + flat[i + 1]->position;
        if (on + flat[i]->duration > next) {
            if (mode == DecodeMode::Strict) {
                throw CodecError("codec violation: overlapping melody notes");
            }
            flat[i]->duration = static_cast<int>(next - on);
            ++d.out.stats.truncated_melody;
        }
    }
    return d.out;
}

Decoded decode(const InterleavedSequence& seq, DecodeMode mode) {
    return decode(std::span<const SuperToken>(seq.tokens), mode);
}

std::vector<InterleavedSequence> window(const InterleavedSequence& seq, int max_len,
                                        int stride_bars) {
    if (stride_bars < 1) throw std::invalid_argument("stride_bars must be >= 1");

    // Chunk k spans from BAR_SRC of bar k up to the next BAR_SRC (the last
    // chunk runs to the end of the sequence, EOS included).
    std::vector<size_t> starts;
    for (size_t i = 0; i < seq.tokens.size(); ++i) {
        const auto& t = seq.tokens[i];
        if (t.bar == kBarSrc) starts.push_back(i);
    }
    std::vector<InterleavedSequence> out;
    if (starts.empty()) return out;
    size_t num_bars = starts.size();
    auto chunk_end = [&](size_t k) {
        return k + 1 < num_bars ? starts[k + 1] : seq.tokens.size();
    };

    size_t b = 0;
    while (b < num_bars) {
        InterleavedSequence w;
        size_t budget = static_cast<size_t>(max_len);
        size_t prefix = (b == 0 && starts[0] > 0) ? starts[0] : 0;  // leading BOS
        size_t k = b;
        size_t used = prefix;
        while (k < num_bars) {
            size_t len = chunk_end(k) - starts[k];
            if (used + len > budget) break;
            used += len;
            ++k;
        }
        if (k == b) {
            std::cerr << "warning: bar pair " << b << " exceeds max_len " << max_len
                      << "; dropped\n";
            b += stride_bars;
            continue;
        }
        for (size_t i = starts[b] - prefix; i < chunk_end(k - 1); ++i) {
            w.push(seq.tokens[i], seq.bar_index[i], seq.side[i]);
        }
        out.push_back(std::move(w));
        if (k == num_bars) break;  // covered through the final bar
        b += stride_bars;
    }
    return out;
}

std::vector<MidiLikeToken> encode_midi_like(const std::vector<Bar>& bars) {
    std::vector<NoteEvent> notes;
    for (const auto& b : bars) notes.insert(notes.end(), b.begin(), b.end());
    std::sort(notes.begin(), notes.end());

    struct Boundary {
        int64_t step;
        int rank;  // offs before ons
        size_t idx;
    };
    std::vector<Boundary> bounds;
    auto abs_on = [](const NoteEvent& n) {
        return int64_t(n.bar) * TimeGrid::kStepsPerBar + n.position;
    };
    for (size_t i = 0; i < notes.size(); ++i) {
        bounds.push_back({abs_on(notes[i]), 1, i});
        bounds.push_back({abs_on(notes[i]) + notes[i].duration, 0, i});
    }
    std::sort(bounds.begin(), bounds.end(), [&](const Boundary& a, const Boundary& b) {
        return std::tie(a.step, a.rank, a.idx) < std::tie(b.step, b.rank, b.idx);
    });

    std::vector<MidiLikeToken> out;
    int64_t cursor = 0;
    for (const auto& ev : bounds) {
        while (ev.step > cursor) {
            int shift = static_cast<int>(std::min<int64_t>(ev.step - cursor,
                                                           TimeGrid::kStepsPerBar));
            out.push_back({MidiLikeToken::Kind::TimeShift, shift});
            cursor += shift;
        }
        const NoteEvent& n = notes[ev.idx];
        if (ev.rank == 1) {
            out.push_back({MidiLikeToken::Kind::Velocity, n.velocity});
            out.push_back({MidiLikeToken::Kind::NoteOn, n.pitch});
        } else {
            out.push_back({MidiLikeToken::Kind::NoteOff, n.pitch});
        }
    }
    return out;
}

std::vector<Bar> decode_midi_like(const std::vector<MidiLikeToken>& tokens, int num_bars) {
    struct Open {
        int64_t step;
        int velocity;
    };
    std::map<int, std::vector<Open>> open;  // FIFO per pitch
    std::vector<NoteEvent> notes;
    int64_t cursor = 0;
    int velocity = 64;
    for (const auto& t : tokens) {
        switch (t.kind) {
            case MidiLikeToken::Kind::TimeShift:
                if (t.value <= 0) throw CodecError("non-positive time shift");
                cursor += t.value;
                break;
            case MidiLikeToken::Kind::Velocity:
                velocity = t.value;
                break;
            case MidiLikeToken::Kind::NoteOn:
                open[t.value].push_back({cursor, velocity});
                break;
            case MidiLikeToken::Kind::NoteOff: {
                auto it = open.find(t.value);
                if (it == open.end() || it->second.empty()) {
                    throw CodecError("note-off without matching note-on");
                }
                Open o = it->second.front();
                it->second.erase(it->second.begin());
                NoteEvent n;
                n.bar = static_cast<int>(o.step / TimeGrid::kStepsPerBar);
                n.position = static_cast<int>(o.step % TimeGrid::kStepsPerBar);
                n.pitch = t.value;
                n.duration = std::clamp<int>(static_cast<int>(cursor - o.step), 1,
                                             TimeGrid::kMaxDurationSteps);
                n.velocity = o.velocity;
                notes.push_back(n);
                break;
            }
        }
    }
    std::sort(notes.begin(), notes.end());
    int bars_needed = num_bars;
    for (const auto& n : notes) bars_needed = std::max(bars_needed, n.bar + 1);
    std::vector<Bar> out(std::max(bars_needed, 0));
    for (const auto& n : notes) out[n.bar].push_back(n);
    return out;
}

std::string midi_like_to_string(const MidiLikeToken& t) {
    switch (t.kind) {
        case MidiLikeToken::Kind::Velocity:
            return "velocity:" + std::to_string(t.value);
        case MidiLikeToken::Kind::NoteOn:
            return "note_on:" + std::to_string(t.value);
        case MidiLikeToken::Kind::TimeShift:
            return "time_shift:" + std::to_string(t.value);
        case MidiLikeToken::Kind::NoteOff:
            return "note_off:" + std::to_string(t.value);
    }
    throw std::logic_error("bad midi-like token kind");
}

MidiLikeToken midi_like_from_string(const std::string& s) {
    auto colon = s.find(':');
    if (colon == std::string::npos) throw CodecError("bad midi-like token '" + s + "'");
    std::string head = s.substr(0, colon);
    int value = std::stoi(s.substr(colon + 1));
    if (head == "velocity") return {MidiLikeToken::Kind::Velocity, value};
    if (head == "note_on") return {MidiLikeToken::Kind::NoteOn, value};
    if (head == "time_shift") return {MidiLikeToken::Kind::TimeShift, value};
    if (head == "note_off") return {MidiLikeToken::Kind::NoteOff, value};
    throw CodecError("bad midi-like token '" + s + "'");
}

}  // namespace picogen
