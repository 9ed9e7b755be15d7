#pragma once

#include <string>
#include <vector>

#include "picogen/performer.hpp"
#include "picogen/tokenizer.hpp"

namespace picogen {

class DatasetError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct DatasetItem {
    std::string piece_id;
    std::vector<IdRecord> ids;
};

// One JSON object per line: {"piece_id": str, "ids": [[spec,bar,pos,tempo,chord,pitch,dur,vel], ...]}
std::string dataset_line(const std::string& piece_id, const InterleavedSequence& seq);
std::vector<DatasetItem> read_dataset(const std::string& path);

struct DatasetStats {
    size_t files_ok = 0;
    size_t files_skipped = 0;
    size_t windows = 0;
    size_t total_tokens = 0;
    size_t total_bar_pairs = 0;

    double mean_tokens_per_bar() const {
        return total_bar_pairs == 0 ? 0.0 : double(total_tokens) / double(total_bar_pairs);
    }
};

// Flat key-value config with a mandatory version key; lines are "key = value",
// '#' starts a comment.
struct PipelineConfig {
    ModelConfig model;
    int stride_bars = 1;
    int jobs = 1;
    double hop_seconds = 0.01;
    double temperature = 1.0;
    double top_p = 1.0;
    uint64_t sample_seed = 0;
    int max_tokens_per_bar = 64;
};

PipelineConfig parse_pipeline_config(std::string_view text);
std::string format_pipeline_config(const PipelineConfig& cfg);
PipelineConfig load_pipeline_config(const std::string& path);

}  // namespace picogen
