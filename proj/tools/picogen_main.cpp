#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <json.hpp>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "picogen/dataset.hpp"
#include "picogen/leadsheet.hpp"
#include "picogen/metrics.hpp"
#include "picogen/midi_core.hpp"
#include "picogen/performer.hpp"
#include "picogen/tokenizer.hpp"

namespace fs = std::filesystem;
using namespace picogen;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumeric = 3;

std::vector<uint8_t> read_binary(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DatasetError("cannot open " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                               std::istreambuf_iterator<char>());
    return bytes;
}

std::string read_text(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DatasetError("cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_binary(const std::string& path, const std::vector<uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DatasetError("cannot write " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DatasetError("failed writing " + path);
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw DatasetError("cannot write " + path);
    out << text;
    if (!out) throw DatasetError("failed writing " + path);
}

bool is_midi_file(const fs::path& p) {
    std::string ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(),
                   [](unsigned char c) { return std::tolower(c); });
    return ext == ".mid" || ext == ".midi";
}

std::vector<fs::path> list_midi_files(const std::string& dir) {
    if (!fs::is_directory(dir)) throw DatasetError(dir + " is not a directory");
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.is_regular_file() && is_midi_file(e.path())) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    return files;
}

struct BuildResult {
    std::vector<std::string> lines;
    size_t tokens = 0;
    size_t bar_pairs = 0;
    std::string skip_reason;
};

int cmd_build_dataset(const std::string& midi_dir, const std::string& out_path, int stride_bars,
                      int max_len, int jobs, std::string vocab_path) {
    auto files = list_midi_files(midi_dir);
    if (files.empty()) throw DatasetError("no MIDI files in " + midi_dir);

    std::vector<BuildResult> results(files.size());
#ifdef _OPENMP
    if (jobs > 0) omp_set_num_threads(jobs);
#pragma omp parallel for schedule(dynamic)
#endif
    for (size_t i = 0; i < files.size(); ++i) {
        BuildResult& r = results[i];
        try {
            auto bytes = read_binary(files[i].string());
            auto parsed = parse_midi(bytes);
            auto notes = quantize(parsed.notes, parsed.grid);
            auto bars = split_bars(notes, parsed.grid);
            auto ls = derive_leadsheet(bars, parsed.grid);
            auto seq = build_interleaved(ls, &bars);
            auto windows = window(seq, max_len, stride_bars);
            for (size_t w = 0; w < windows.size(); ++w) {
                std::string id = files[i].filename().string() + "#" + std::to_string(w);
                r.lines.push_back(dataset_line(id, windows[w]));
                r.tokens += windows[w].size();
                for (const auto& tok : windows[w].tokens) {
                    if (tok.bar == kBarSrc) ++r.bar_pairs;
                }
            }
        } catch (const std::exception& e) {
            r.skip_reason = e.what();
        }
    }

    DatasetStats stats;
    std::ofstream out(out_path);
    if (!out) throw DatasetError("cannot write " + out_path);
    for (size_t i = 0; i < files.size(); ++i) {
        const BuildResult& r = results[i];
        if (!r.skip_reason.empty()) {
            ++stats.files_skipped;
            std::cerr << "skipped " << files[i].filename().string() << ": " << r.skip_reason
                      << "\n";
            continue;
        }
        ++stats.files_ok;
        stats.windows += r.lines.size();
        stats.total_tokens += r.tokens;
        stats.total_bar_pairs += r.bar_pairs;
        for (const auto& line : r.lines) out << line << "\n";
    }
    if (!out) throw DatasetError("failed writing " + out_path);
    out.close();

    if (stats.files_ok == 0) throw DatasetError("no usable MIDI files in " + midi_dir);

    if (vocab_path.empty()) vocab_path = out_path + ".vocab.json";
    write_text(vocab_path, Vocab().save());

    std::cerr << "files: " << stats.files_ok << " ok, " << stats.files_skipped
              << " skipped; windows: " << stats.windows
              << "; mean super tokens per bar: " << stats.mean_tokens_per_bar() << "\n";
    return kExitOk;
}

int cmd_train(const std::string& dataset_path, const std::string& ckpt_path,
              const std::string& metrics_path, const ModelConfig& cfg) {
    auto items = read_dataset(dataset_path);
    std::vector<std::vector<IdRecord>> windows;
    windows.reserve(items.size());
    for (auto& it : items) windows.push_back(std::move(it.ids));

    TrainResult res = train(windows, cfg);
    save_checkpoint(res.state, ckpt_path);
    if (!metrics_path.empty()) write_metrics_csv(res.curve, metrics_path);

    double final_loss = res.curve.empty() ? 0.0 : res.curve.back().loss;
    std::cerr << "trained " << res.state.step << " steps; final loss " << final_loss << "\n";
    return kExitOk;
}

int cmd_generate(const std::string& ls_path, const std::string& ckpt_path,
                 const std::string& out_path, const SamplingConfig& sc) {
    LeadSheet ls = load_leadsheet(read_text(ls_path));
    if (ls.bars.empty()) throw SchemaError("lead sheet has no bars");
    TrainState state = load_checkpoint(ckpt_path);

    GenerateResult gen = generate(ls, state, sc);
    std::vector<NoteEvent> notes;
    for (const auto& b : gen.piano) notes.insert(notes.end(), b.begin(), b.end());
    std::sort(notes.begin(), notes.end());

    TimeGrid grid;
    grid.tempo_bpm = clamp_tempo(ls.tempo_bpm);
    grid.num_bars = static_cast<int>(gen.piano.size());
    write_binary(out_path, write_midi(notes, grid));

    std::cerr << "generated " << gen.piano.size() << " bars (" << gen.sampled_tokens
              << " tokens sampled, " << gen.forced_closes << " forced closes)\n";
    return kExitOk;
}

nlohmann::json report_to_json(const McaReport& r) {
    return {{"mca", r.mca},
            {"voiced_frames", r.voiced_frames},
            {"matched_frames", r.matched_frames}};
}

McaReport eval_one(const std::string& midi_path, const std::string& f0_path) {
    auto parsed = parse_midi(read_binary(midi_path));
    auto notes = quantize(parsed.notes, parsed.grid);
    F0Contour ref = load_f0_csv(read_text(f0_path));
    auto estimate = top_line(notes, parsed.grid, ref.hop_seconds);
    return mca(estimate, ref);
}

int cmd_eval_mca(const std::string& midi_path, const std::string& f0_path,
                 const std::string& midi_dir, const std::string& f0_dir,
                 const std::string& out_path) {
    nlohmann::json doc;
    if (!midi_dir.empty()) {
        auto files = list_midi_files(midi_dir);
        if (files.empty()) throw DatasetError("no MIDI files in " + midi_dir);
        doc["songs"] = nlohmann::json::array();
        double sum = 0.0;
        for (const auto& f : files) {
            fs::path csv = fs::path(f0_dir) / (f.stem().string() + ".csv");
            if (!fs::exists(csv)) throw DatasetError("no f0 contour for " + f.filename().string());
            McaReport r = eval_one(f.string(), csv.string());
            auto j = report_to_json(r);
            j["name"] = f.filename().string();
            doc["songs"].push_back(std::move(j));
            sum += r.mca;
        }
        doc["mean_mca"] = sum / double(files.size());
    } else {
        doc = report_to_json(eval_one(midi_path, f0_path));
    }
    std::string text = doc.dump(2) + "\n";
    if (out_path.empty()) {
        std::cout << text;
    } else {
        write_text(out_path, text);
    }
    return kExitOk;
}

int cmd_tokenize(const std::string& midi_path, const std::string& out_path,
                 const std::string& repr, std::string vocab_path) {
    auto parsed = parse_midi(read_binary(midi_path));
    auto notes = quantize(parsed.notes, parsed.grid);
    auto bars = split_bars(notes, parsed.grid);
    std::string piece_id = fs::path(midi_path).filename().string();

    nlohmann::json line;
    if (repr == "cp") {
        auto ls = derive_leadsheet(bars, parsed.grid);
        auto seq = build_interleaved(ls, &bars);
        line = nlohmann::json::parse(dataset_line(piece_id, seq));
        line["repr"] = "cp";
        if (vocab_path.empty()) vocab_path = out_path + ".vocab.json";
        write_text(vocab_path, Vocab().save());
    } else {
        auto toks = encode_midi_like(bars);
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& t : toks) arr.push_back(midi_like_to_string(t));
        line = {{"piece_id", piece_id},
                {"repr", "midi-like"},
                {"tempo_bpm", parsed.grid.tempo_bpm},
                {"tokens", std::move(arr)}};
    }
    write_text(out_path, line.dump() + "\n");
    std::cerr << "tokenized " << piece_id << " (" << repr << ")\n";
    return kExitOk;
}

int cmd_detokenize(const std::string& tokens_path, const std::string& out_path) {
    std::ifstream in(tokens_path);
    if (!in) throw DatasetError("cannot open " + tokens_path);
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line) && line.empty()) ++lineno;
    ++lineno;
    if (line.empty()) throw DatasetError(tokens_path + " has no token lines");

    nlohmann::json j;
    try {
        j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
        throw DatasetError(tokens_path + ":" + std::to_string(lineno) + ": bad JSON: " +
                           e.what());
    }

    std::vector<Bar> bars;
    TimeGrid grid;
    std::string repr = j.value("repr", "cp");
    if (repr == "midi-like") {
        std::vector<MidiLikeToken> toks;
        for (const auto& s : j.at("tokens")) toks.push_back(midi_like_from_string(s));
        bars = decode_midi_like(toks);
        grid.tempo_bpm = clamp_tempo(j.value("tempo_bpm", 120.0));
    } else {
        std::vector<SuperToken> tokens;
        for (const auto& rec : j.at("ids")) {
            IdRecord ids;
            if (!rec.is_array() || rec.size() != kNumFields) {
                throw DatasetError(tokens_path + ":" + std::to_string(lineno) +
                                   ": record is not an array of 8 ids");
            }
            for (int f = 0; f < kNumFields; ++f) ids[f] = rec[f].get<int>();
            tokens.push_back(token_from_ids(ids));
        }
        Decoded dec = decode(std::span<const SuperToken>(tokens), DecodeMode::Strict);
        bars = std::move(dec.piano);
        grid.tempo_bpm = clamp_tempo(dec.leadsheet.tempo_bpm);
    }
    grid.num_bars = static_cast<int>(bars.size());
    std::vector<NoteEvent> notes;
    for (const auto& b : bars) notes.insert(notes.end(), b.begin(), b.end());
    std::sort(notes.begin(), notes.end());
    write_binary(out_path, write_midi(notes, grid));
    std::cerr << "wrote " << notes.size() << " notes over " << bars.size() << " bars\n";
    return kExitOk;
}

struct TrainFlags {
    std::string dataset, checkpoint, metrics, config;
    std::optional<int> d_model, n_layers, n_heads, max_len, warmup, batch_size, max_steps,
        epochs;
    std::optional<uint64_t> seed;
    std::optional<double> lr, target_loss, weight_decay, grad_clip;
};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"PiCoGen symbolic pipeline: lead sheets, CP tokens, a desk-scale Performer, "
                 "and MCA evaluation"};
    app.require_subcommand(1);

    // build-dataset
    std::string bd_dir, bd_out, bd_vocab;
    int bd_stride = 1, bd_max_len = 1024, bd_jobs = 0;
    auto* bd = app.add_subcommand("build-dataset",
                                  "Tokenize a directory of piano MIDI into training windows");
    bd->add_option("--midi-dir", bd_dir, "Directory of .mid files")->required();
    bd->add_option("--out", bd_out, "Output JSONL path")->required();
    bd->add_option("--stride-bars", bd_stride, "Window stride in bars");
    bd->add_option("--max-len", bd_max_len, "Window budget in super tokens");
    bd->add_option("--jobs", bd_jobs, "Worker threads (0 = all cores)");
    bd->add_option("--vocab", bd_vocab, "Vocab JSON path (default <out>.vocab.json)");

    // train
    TrainFlags tf;
    auto* tr = app.add_subcommand("train", "Train the Performer on a token dataset");
    tr->add_option("--dataset", tf.dataset, "Token JSONL")->required();
    tr->add_option("--out", tf.checkpoint, "Checkpoint output path")->required();
    tr->add_option("--metrics", tf.metrics, "Per-step loss CSV path");
    tr->add_option("--config", tf.config, "Pipeline config file");
    tr->add_option("--d-model", tf.d_model, "Model width");
    tr->add_option("--n-layers", tf.n_layers, "Decoder layers");
    tr->add_option("--n-heads", tf.n_heads, "Attention heads");
    tr->add_option("--max-len", tf.max_len, "Context length");
    tr->add_option("--seed", tf.seed, "RNG seed");
    tr->add_option("--lr", tf.lr, "Learning rate");
    tr->add_option("--warmup", tf.warmup, "Warmup steps");
    tr->add_option("--weight-decay", tf.weight_decay, "Decoupled weight decay");
    tr->add_option("--grad-clip", tf.grad_clip, "Gradient norm clip");
    tr->add_option("--batch-size", tf.batch_size, "Sequences per step");
    tr->add_option("--max-steps", tf.max_steps, "Step budget");
    tr->add_option("--epochs", tf.epochs, "Epoch budget (0 = until max-steps)");
    tr->add_option("--target-loss", tf.target_loss, "Early-stop loss (0 = off)");

    // generate
    std::string g_ls, g_ckpt, g_out;
    double g_temp = 1.0, g_top_p = 1.0;
    uint64_t g_seed = 0;
    int g_max_per_bar = 64;
    auto* ge = app.add_subcommand("generate", "Generate a piano cover from a lead sheet");
    ge->add_option("--leadsheet", g_ls, "Lead-sheet JSON")->required();
    ge->add_option("--checkpoint", g_ckpt, "Trained checkpoint")->required();
    ge->add_option("--out", g_out, "Output MIDI path")->required();
    ge->add_option("--temperature", g_temp, "Sampling temperature (0 = greedy)");
    ge->add_option("--top-p", g_top_p, "Nucleus sampling mass");
    ge->add_option("--seed", g_seed, "Sampling seed");
    ge->add_option("--max-tokens-per-bar", g_max_per_bar, "Force-close budget per bar");

    // eval-mca
    std::string e_midi, e_f0, e_midi_dir, e_f0_dir, e_out;
    auto* ev = app.add_subcommand("eval-mca", "Melody chroma accuracy against an f0 contour");
    ev->add_option("--midi", e_midi, "Generated MIDI file");
    ev->add_option("--f0", e_f0, "Reference contour CSV (time_sec,f0_hz)");
    ev->add_option("--midi-dir", e_midi_dir, "Directory mode: MIDI files");
    ev->add_option("--f0-dir", e_f0_dir, "Directory mode: contour CSVs");
    ev->add_option("--out", e_out, "Report JSON path (default stdout)");

    // tokenize / detokenize
    std::string tk_midi, tk_out, tk_repr = "cp", tk_vocab;
    auto* tk = app.add_subcommand("tokenize", "Encode a MIDI file to a token JSONL line");
    tk->add_option("--midi", tk_midi, "Input MIDI")->required();
    tk->add_option("--out", tk_out, "Output JSONL")->required();
    tk->add_option("--repr", tk_repr, "Representation: cp | midi-like")
        ->check(CLI::IsMember({"cp", "midi-like"}));
    tk->add_option("--vocab", tk_vocab, "Vocab JSON path (cp only)");

    std::string dt_tokens, dt_out;
    auto* dt = app.add_subcommand("detokenize", "Decode a token JSONL line back to MIDI");
    dt->add_option("--tokens", dt_tokens, "Input JSONL")->required();
    dt->add_option("--out", dt_out, "Output MIDI")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (bd->parsed()) {
            return cmd_build_dataset(bd_dir, bd_out, bd_stride, bd_max_len, bd_jobs, bd_vocab);
        }
        if (tr->parsed()) {
            ModelConfig cfg;
            if (!tf.config.empty()) cfg = load_pipeline_config(tf.config).model;
            if (tf.d_model) cfg.d_model = *tf.d_model;
            if (tf.n_layers) cfg.n_layers = *tf.n_layers;
            if (tf.n_heads) cfg.n_heads = *tf.n_heads;
            if (tf.max_len) cfg.max_len = *tf.max_len;
            if (tf.seed) cfg.seed = *tf.seed;
            if (tf.lr) cfg.learning_rate = *tf.lr;
            if (tf.warmup) cfg.warmup_steps = *tf.warmup;
            if (tf.weight_decay) cfg.weight_decay = *tf.weight_decay;
            if (tf.grad_clip) cfg.grad_clip = *tf.grad_clip;
            if (tf.batch_size) cfg.batch_size = *tf.batch_size;
            if (tf.max_steps) cfg.max_steps = *tf.max_steps;
            if (tf.epochs) cfg.epochs = *tf.epochs;
            if (tf.target_loss) cfg.target_loss = *tf.target_loss;
            return cmd_train(tf.dataset, tf.checkpoint, tf.metrics, cfg);
        }
        if (ge->parsed()) {
            SamplingConfig sc;
            sc.temperature = g_temp;
            sc.top_p = g_top_p;
            sc.seed = g_seed;
            sc.max_tokens_per_bar = g_max_per_bar;
            return cmd_generate(g_ls, g_ckpt, g_out, sc);
        }
        if (ev->parsed()) {
            bool dir_mode = !e_midi_dir.empty() || !e_f0_dir.empty();
            if (dir_mode && (e_midi_dir.empty() || e_f0_dir.empty())) {
                std::cerr << "error: directory mode needs both --midi-dir and --f0-dir\n";
                return kExitUsage;
            }
            if (!dir_mode && (e_midi.empty() || e_f0.empty())) {
                std::cerr << "error: need --midi and --f0 (or --midi-dir/--f0-dir)\n";
                return kExitUsage;
            }
            return cmd_eval_mca(e_midi, e_f0, e_midi_dir, e_f0_dir, e_out);
        }
        if (tk->parsed()) return cmd_tokenize(tk_midi, tk_out, tk_repr, tk_vocab);
        if (dt->parsed()) return cmd_detokenize(dt_tokens, dt_out);
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const UndefinedMetricError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    }
    return kExitUsage;
}
