#include "picogen/dataset.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

namespace picogen {

std::string dataset_line(const std::string& piece_id, const InterleavedSequence& seq) {
    nlohmann::json ids = nlohmann::json::array();
    for (const auto& tok : seq.tokens) ids.push_back(token_to_ids(tok));
    nlohmann::json line = {{"piece_id", piece_id}, {"ids", std::move(ids)}};
    return line.dump();
}

std::vector<DatasetItem> read_dataset(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DatasetError("cannot open dataset " + path);
    std::vector<DatasetItem> items;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw DatasetError(path + ":" + std::to_string(lineno) + ": bad JSON: " + e.what());
        }
        DatasetItem item;
        try {
            item.piece_id = j.at("piece_id").get<std::string>();
            for (const auto& rec : j.at("ids")) {
                if (!rec.is_array() || rec.size() != kNumFields) {
                    throw DatasetError(path + ":" + std::to_string(lineno) +
                                       ": record is not an array of 8 ids");
                }
                IdRecord ids;
                for (int f = 0; f < kNumFields; ++f) {
                    int id = rec[f].get<int>();
                    if (id < 0 || id >= kFieldSizes[f]) {
                        throw DatasetError(path + ":" + std::to_string(lineno) + ": id " +
                                           std::to_string(id) + " out of range for field " +
                                           kFieldNames[f]);
                    }
                    ids[f] = id;
                }
                item.ids.push_back(ids);
            }
        } catch (const nlohmann::json::exception& e) {
            throw DatasetError(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
        items.push_back(std::move(item));
    }
    return items;
}

namespace {

constexpr int kConfigVersion = 1;

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
    std::istringstream ss(value);
    T out;
    ss >> out;
    if (ss.fail()) throw DatasetError("config key '" + key + "': bad value '" + value + "'");
    return out;
}

}  // namespace

PipelineConfig parse_pipeline_config(std::string_view text) {
    PipelineConfig cfg;
    bool versioned = false;
    std::istringstream in{std::string(text)};
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        auto first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos) continue;
        auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw DatasetError("config line " + std::to_string(lineno) + ": expected key = value");
        }
        auto trim = [](std::string s) {
            auto b = s.find_first_not_of(" \t\r");
            auto e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));

        if (key == "version") {
            if (parse_number<int>(key, value) != kConfigVersion) {
                throw DatasetError("unsupported config version " + value);
            }
            versioned = true;
        } else if (key == "d_model") {
            cfg.model.d_model = parse_number<int>(key, value);
        } else if (key == "n_layers") {
            cfg.model.n_layers = parse_number<int>(key, value);
        } else if (key == "n_heads") {
            cfg.model.n_heads = parse_number<int>(key, value);
        } else if (key == "max_len") {
            cfg.model.max_len = parse_number<int>(key, value);
        } else if (key == "mlp_hidden") {
            cfg.model.mlp_hidden = parse_number<int>(key, value);
        } else if (key == "seed") {
            cfg.model.seed = parse_number<uint64_t>(key, value);
        } else if (key == "learning_rate") {
            cfg.model.learning_rate = parse_number<double>(key, value);
        } else if (key == "warmup_steps") {
            cfg.model.warmup_steps = parse_number<int>(key, value);
        } else if (key == "grad_clip") {
            cfg.model.grad_clip = parse_number<double>(key, value);
        } else if (key == "weight_decay") {
            cfg.model.weight_decay = parse_number<double>(key, value);
        } else if (key == "batch_size") {
            cfg.model.batch_size = parse_number<int>(key, value);
        } else if (key == "max_steps") {
            cfg.model.max_steps = parse_number<int>(key, value);
        } else if (key == "epochs") {
            cfg.model.epochs = parse_number<int>(key, value);
        } else if (key == "target_loss") {
            cfg.model.target_loss = parse_number<double>(key, value);
        } else if (key == "stride_bars") {
            cfg.stride_bars = parse_number<int>(key, value);
        } else if (key == "jobs") {
            cfg.jobs = parse_number<int>(key, value);
        } else if (key == "hop_seconds") {
            cfg.hop_seconds = parse_number<double>(key, value);
        } else if (key == "temperature") {
            cfg.temperature = parse_number<double>(key, value);
        } else if (key == "top_p") {
            cfg.top_p = parse_number<double>(key, value);
        } else if (key == "sample_seed") {
            cfg.sample_seed = parse_number<uint64_t>(key, value);
        } else if (key == "max_tokens_per_bar") {
            cfg.max_tokens_per_bar = parse_number<int>(key, value);
        } else {
            throw DatasetError("config line " + std::to_string(lineno) + ": unknown key '" +
                               key + "'");
        }
    }
    if (!versioned) throw DatasetError("config file is missing the 'version' key");
    return cfg;
}

std::string format_pipeline_config(const PipelineConfig& cfg) {
    std::ostringstream out;
    out.precision(17);
    out << "version = " << kConfigVersion << "\n";
    out << "d_model = " << cfg.model.d_model << "\n";
    out << "n_layers = " << cfg.model.n_layers << "\n";
    out << "n_heads = " << cfg.model.n_heads << "\n";
    out << "max_len = " << cfg.model.max_len << "\n";
    out << "mlp_hidden = " << cfg.model.mlp_hidden << "\n";
    out << "seed = " << cfg.model.seed << "\n";
    out << "learning_rate = " << cfg.model.learning_rate << "\n";
    out << "warmup_steps = " << cfg.model.warmup_steps << "\n";
    out << "grad_clip = " << cfg.model.grad_clip << "\n";
    out << "weight_decay = " << cfg.model.weight_decay << "\n";
    out << "batch_size = " << cfg.model.batch_size << "\n";
    out << "max_steps = " << cfg.model.max_steps << "\n";
    out << "epochs = " << cfg.model.epochs << "\n";
    out << "target_loss = " << cfg.model.target_loss << "\n";
    out << "stride_bars = " << cfg.stride_bars << "\n";
    out << "jobs = " << cfg.jobs << "\n";
    out << "hop_seconds = " << cfg.hop_seconds << "\n";
    out << "temperature = " << cfg.temperature << "\n";
    out << "top_p = " << cfg.top_p << "\n";
    out << "sample_seed = " << cfg.sample_seed << "\n";
    out << "max_tokens_per_bar = " << cfg.max_tokens_per_bar << "\n";
    return out.str();
}

PipelineConfig load_pipeline_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DatasetError("cannot open config " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_pipeline_config(ss.str());
}

}  // namespace picogen
