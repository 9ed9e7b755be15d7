#include "picogen/midi_core.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <map>

namespace picogen {

namespace {

struct Cursor {
    std::span<const uint8_t> data;
    size_t pos = 0;

    [[noreturn]] void fail(const std::string& what) const {
        throw MidiError(what + " at byte " + std::to_string(pos));
    }
    void need(size_t n) const {
        if (pos + n > data.size()) {
            throw MidiError("unexpected end of file at byte " + std::to_string(pos));
        }
    }
    uint8_t u8() {
        need(1);
        return data[pos++];
    }
    uint8_t peek() const {
        need(1);
        return data[pos];
    }
    uint32_t u16be() {
        need(2);
        uint32_t v = (uint32_t(data[pos]) << 8) | data[pos + 1];
        pos += 2;
        return v;
    }
    uint32_t u32be() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v = (v << 8) | data[pos + i];
        pos += 4;
        return v;
    }
    // MIDI variable-length quantity, at most 4 bytes.
    uint32_t varlen() {
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            uint8_t b = u8();
            v = (v << 7) | (b & 0x7f);
            if (!(b & 0x80)) return v;
        }
        fail("variable-length quantity too long");
    }
    void skip(size_t n) {
        need(n);
        pos += n;
    }
};

struct TrackNoteEvent {
    int64_t tick;
    bool on;
    int pitch;
    int velocity;
};

struct TempoEvent {
    int64_t tick;
    int order;
    double bpm;
};

// Rounds num/den to the nearest integer with ties toward the smaller value.
int64_t div_round_ties_down(int64_t num, int64_t den) {
    int64_t q = num / den;
    int64_t r = num % den;
    return q + (2 * r > den ? 1 : 0);
}

}  // namespace

double clamp_tempo(double bpm) {
    return std::min(244.0, std::max(32.0, bpm));
}

int ticks_to_step(int64_t ticks, int ppq) {
    return static_cast<int>(div_round_ties_down(ticks * 4, ppq));
}

ParsedMidi parse_midi(std::span<const uint8_t> bytes) {
    Cursor c{bytes};

    if (bytes.size() < 14) c.fail("truncated MIDI header");
    if (!(bytes[0] == 'M' && bytes[1] == 'T' && bytes[2] == 'h' && bytes[3] == 'd')) {
        c.fail("missing MThd magic");
    }
    c.pos = 4;
    uint32_t header_len = c.u32be();
    if (header_len < 6) c.fail("bad MThd length");
    uint32_t format = c.u16be();
    uint32_t ntrks = c.u16be();
    uint32_t division = c.u16be();
    if (format > 1) c.fail("unsupported MIDI format " + std::to_string(format));
    if (division & 0x8000) c.fail("SMPTE time division not supported");
    if (division == 0) c.fail("zero PPQ");
    c.skip(header_len - 6);

    std::vector<TrackNoteEvent> events;
    std::vector<TempoEvent> tempos;
    int tempo_order = 0;

    for (uint32_t t = 0; t < ntrks; ++t) {
        size_t magic_at = c.pos;
        c.need(4);
        bool is_mtrk = bytes[magic_at] == 'M' && bytes[magic_at + 1] == 'T' &&
                       bytes[magic_at + 2] == 'r' && bytes[magic_at + 3] == 'k';
        if (!is_mtrk) c.fail("missing MTrk magic for track " + std::to_string(t));
        c.pos = magic_at + 4;
        uint32_t track_len = c.u32be();
        size_t track_end = c.pos + track_len;
        if (track_end > bytes.size()) c.fail("track length overruns file");

        int64_t tick = 0;
        uint8_t running = 0;
        bool ended = false;
        while (c.pos < track_end && !ended) {
            tick += c.varlen();
            uint8_t status = c.peek();
            if (status & 0x80) {
                c.skip(1);
                if (status < 0xf0) running = status;
            } else {
                if (running == 0) c.fail("data byte with no running status");
                status = running;
            }

            if (status == 0xff) {
                uint8_t type = c.u8();
                uint32_t len = c.varlen();
                c.need(len);
                if (type == 0x2f) {
                    ended = true;
                } else if (type == 0x51 && len == 3) {
                    uint32_t uspq = (uint32_t(bytes[c.pos]) << 16) |
                                    (uint32_t(bytes[c.pos + 1]) << 8) | bytes[c.pos + 2];
                    if (uspq == 0) c.fail("zero tempo");
                    tempos.push_back({tick, tempo_order++, 60e6 / uspq});
                } else if (type == 0x58 && len >= 2) {
                    int nn = bytes[c.pos];
                    int dd = bytes[c.pos + 1];
                    if (nn != 4 || dd != 2) {
                        throw UnsupportedMeterError(
                            "unsupported time signature " + std::to_string(nn) + "/" +
                            std::to_string(1 << dd) + " at byte " + std::to_string(c.pos));
                    }
                }
                c.skip(len);
                running = 0;
            } else if (status == 0xf0 || status == 0xf7) {
                uint32_t len = c.varlen();
                c.skip(len);
                running = 0;
            } else {
                uint8_t hi = status & 0xf0;
                switch (hi) {
                    case 0x80:
                    case 0x90: {
                        int pitch = c.u8();
                        int vel = c.u8();
                        if (pitch > 127 || vel > 127) c.fail("note data byte out of range");
                        bool on = (hi == 0x90 && vel > 0);
                        events.push_back({tick, on, pitch, on ? vel : 0});
                        break;
                    }
                    case 0xa0:
                    case 0xb0:
                    case 0xe0:
                        c.skip(2);
                        break;
                    case 0xc0:
                    case 0xd0:
                        c.skip(1);
                        break;
                    default:
                        c.fail("unexpected status byte " + std::to_string(status));
                }
            }
        }
        // Close anything still sounding at the end-of-track time.
        events.push_back({tick, false, -1, 0});
        c.pos = track_end;
    }

    std::stable_sort(events.begin(), events.end(),
                     [](const TrackNoteEvent& a, const TrackNoteEvent& b) { return a.tick < b.tick; });

    ParsedMidi out;
    std::map<int, RawNote> open;  // pitch -> note awaiting its off
    auto close_note = [&](int pitch, int64_t off_tick) {
        auto it = open.find(pitch);
        if (it == open.end()) return;
        RawNote n = it->second;
        open.erase(it);
        n.offset_ticks = off_tick;
        if (n.offset_ticks > n.onset_ticks) out.notes.push_back(n);
    };
    int64_t last_tick = 0;
    for (const auto& ev : events) {
        last_tick = std::max(last_tick, ev.tick);
        if (ev.pitch < 0) continue;  // track-end marker, resolved below
        if (ev.on) {
            close_note(ev.pitch, ev.tick);  // same-pitch retrigger closes the earlier note
            open[ev.pitch] = RawNote{ev.tick, ev.tick, ev.pitch, ev.velocity};
        } else {
            close_note(ev.pitch, ev.tick);
        }
    }
    while (!open.empty()) close_note(open.begin()->first, last_tick);

    if (out.notes.empty()) throw EmptyInputError("MIDI file contains no notes");

    std::sort(out.notes.begin(), out.notes.end(), [](const RawNote& a, const RawNote& b) {
        return std::tie(a.onset_ticks, a.pitch, a.offset_ticks, a.velocity) <
               std::tie(b.onset_ticks, b.pitch, b.offset_ticks, b.velocity);
    });

    out.grid.ppq = static_cast<int>(division);
    if (tempos.empty()) {
        out.grid.tempo_bpm = 120.0;
    } else {
        auto first = std::min_element(
            tempos.begin(), tempos.end(), [](const TempoEvent& a, const TempoEvent& b) {
                return std::tie(a.tick, a.order) < std::tie(b.tick, b.order);
            });
        out.grid.tempo_bpm = clamp_tempo(first->bpm);
        if (tempos.size() > 1) {
            std::cerr << "warning: " << tempos.size() - 1
                      << " tempo change(s) ignored; keeping the first tempo\n";
        }
    }

    int max_end_step = 0;
    for (const auto& n : out.notes) {
        int s = ticks_to_step(n.onset_ticks, out.grid.ppq);
        int d = static_cast<int>(
            div_round_ties_down((n.offset_ticks - n.onset_ticks) * 4, out.grid.ppq));
        d = std::clamp(d, 1, TimeGrid::kMaxDurationSteps);
        max_end_step = std::max(max_end_step, s + d);
    }
    out.grid.num_bars =
        std::max(1, (max_end_step + TimeGrid::kStepsPerBar - 1) / TimeGrid::kStepsPerBar);
    return out;
}

std::vector<NoteEvent> quantize(const std::vector<RawNote>& notes, const TimeGrid& grid) {
    std::vector<NoteEvent> out;
    out.reserve(notes.size());
    for (const auto& n : notes) {
        int step = ticks_to_step(n.onset_ticks, grid.ppq);
        int dur = static_cast<int>(
            div_round_ties_down((n.offset_ticks - n.onset_ticks) * 4, grid.ppq));
        NoteEvent ev;
        ev.bar = step / TimeGrid::kStepsPerBar;
        ev.position = step % TimeGrid::kStepsPerBar;
        ev.pitch = std::clamp(n.pitch, TimeGrid::kMinPitch, TimeGrid::kMaxPitch);
        ev.duration = std::clamp(dur, 1, TimeGrid::kMaxDurationSteps);
        ev.velocity = std::clamp(n.velocity, 0, 127);
        out.push_back(ev);
    }
    std::sort(out.begin(), out.end());
    return out;
}

std::vector<Bar> split_bars(const std::vector<NoteEvent>& notes, const TimeGrid& grid) {
    int num_bars = grid.num_bars;
    for (const auto& n : notes) num_bars = std::max(num_bars, n.bar + 1);
    std::vector<Bar> bars(std::max(num_bars, 0));
    for (const auto& n : notes) bars[n.bar].push_back(n);
    return bars;
}

namespace {

void put_u32be(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(uint8_t(v >> 24));
    out.push_back(uint8_t(v >> 16));
    out.push_back(uint8_t(v >> 8));
    out.push_back(uint8_t(v));
}

void put_varlen(std::vector<uint8_t>& out, int64_t v) {
    uint8_t buf[4];
    int n = 0;
    do {
        buf[n++] = uint8_t(v & 0x7f);
        v >>= 7;
    } while (v > 0 && n < 4);
    for (int i = n - 1; i >= 0; --i) {
        out.push_back(i > 0 ? (buf[i] | 0x80) : buf[i]);
    }
}

struct WriteEvent {
    int64_t tick;
    int rank;  // note-off before note-on at the same tick
    int pitch;
    int velocity;
};

}  // namespace

std::vector<uint8_t> write_midi(const std::vector<NoteEvent>& notes, const TimeGrid& grid) {
    constexpr int kPpq = 480;
    constexpr int kTicksPerStep = kPpq / 4;

    std::vector<WriteEvent> events;
    events.reserve(notes.size() * 2);
    int64_t end_tick = int64_t(grid.num_bars) * TimeGrid::kStepsPerBar * kTicksPerStep;
    for (const auto& n : notes) {
        int64_t on = int64_t(n.bar * TimeGrid::kStepsPerBar + n.position) * kTicksPerStep;
        int64_t off = on + int64_t(n.duration) * kTicksPerStep;
        // A sounding note cannot carry note-on velocity 0 in SMF.
        events.push_back({on, 1, n.pitch, std::clamp(n.velocity, 1, 127)});
        events.push_back({off, 0, n.pitch, 0});
        end_tick = std::max(end_tick, off);
    }
    std::sort(events.begin(), events.end(), [](const WriteEvent& a, const WriteEvent& b) {
        return std::tie(a.tick, a.rank, a.pitch) < std::tie(b.tick, b.rank, b.pitch);
    });

    std::vector<uint8_t> track;
    double bpm = clamp_tempo(grid.tempo_bpm);
    uint32_t uspq = static_cast<uint32_t>(std::llround(60e6 / bpm));
    put_varlen(track, 0);
    track.insert(track.end(), {0xff, 0x51, 0x03, uint8_t(uspq >> 16), uint8_t(uspq >> 8),
                               uint8_t(uspq)});
    put_varlen(track, 0);
    track.insert(track.end(), {0xff, 0x58, 0x04, 0x04, 0x02, 0x18, 0x08});

    int64_t cur = 0;
    for (const auto& ev : events) {
        put_varlen(track, ev.tick - cur);
        cur = ev.tick;
        track.push_back(ev.rank == 1 ? 0x90 : 0x80);
        track.push_back(uint8_t(ev.pitch));
        track.push_back(uint8_t(ev.velocity));
    }
    put_varlen(track, end_tick - cur);
    track.insert(track.end(), {0xff, 0x2f, 0x00});

    std::vector<uint8_t> out;
    out.insert(out.end(), {'M', 'T', 'h', 'd'});
    put_u32be(out, 6);
    out.insert(out.end(), {0x00, 0x00});  // format 0
    out.insert(out.end(), {0x00, 0x01});  // one track
    out.push_back(uint8_t(kPpq >> 8));
    out.push_back(uint8_t(kPpq & 0xff));
    out.insert(out.end(), {'M', 'T', 'r', 'k'});
    put_u32be(out, static_cast<uint32_t>(track.size()));
    out.insert(out.end(), track.begin(), track.end());
    return out;
}

}  // namespace picogen
