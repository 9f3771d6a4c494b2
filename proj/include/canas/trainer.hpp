#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "canas/checkpoint.hpp"
#include "canas/dataset.hpp"
#include "canas/ladder.hpp"
#include "canas/micronet.hpp"
#include "canas/perfsample.hpp"

namespace canas {

enum class TrainMode { Sandwich, Elastic };

enum class LrScheduleKind { Constant, Cosine };

struct TrainConfig {
    TrainMode mode = TrainMode::Elastic;
    std::string space_path;
    std::int64_t total_steps = 500;
    int batch_size = 8;
    int num_stochastic = 0;  // M; 0 means the mode default (3 elastic, 2 sandwich)
    double lr = 0.05;
    LrScheduleKind lr_schedule = LrScheduleKind::Constant;
    double momentum = 0.9;
    double grad_clip = 5.0;  // global-norm clip; 0 disables
    std::uint64_t seed = 1;
    std::vector<double> ladder_levels;
    double band = 0.10;
    std::vector<double> hss_targets;
    QSchedule q;
    std::size_t bank_capacity = kDefaultBankCapacity;
    std::int64_t checkpoint_every = 0;  // 0: only the final checkpoint
    int eval_batch_size = 16;
    bool parallel_subnets = true;
    DatasetSpec dataset;
    std::string raw_text;  // exact config file contents, embedded in checkpoints

    int effective_m() const {
        if (num_stochastic > 0) return num_stochastic;
        return mode == TrainMode::Elastic ? 3 : 2;
    }
};

// Key = value format with [a, b] lists; relative paths resolve against
// base_dir. Throws std::runtime_error with a line diagnostic on bad input.
TrainConfig parse_train_config(const std::string& text, const std::string& base_dir);
TrainConfig load_train_config(const std::string& path);
std::vector<std::string> validate(const TrainConfig& config);

// Canonical config text with every field spelled out and paths resolved;
// what checkpoints embed, so a resumed run never depends on the original
// file. parse_train_config(serialize(c), "") reproduces c exactly.
std::string serialize(const TrainConfig& config);

struct SubnetRecord {
    std::string role;  // "min" | "max" | "random" | "stochastic"
    std::vector<int> genome;
    double mflops = 0.0;
    double loss = 0.0;
    std::string source;  // "bank" | "explored" | "" for fixed roles
    int pref_rejections = 0;
    bool pref_exhausted = false;
    bool level_fallback = false;
};

struct StepRecord {
    std::int64_t step = 0;
    std::string mode;
    int level = -1;            // elastic only
    double q = 0.0;            // elastic only
    int nearest_min = -1;      // HSS index, elastic only
    std::vector<SubnetRecord> subnets;
};

nlohmann::json to_json(const StepRecord& record);
StepRecord step_record_from_json(const nlohmann::json& j);

struct EvalResult {
    double mean_loss = 0.0;
    double accuracy = 0.0;
};

EvalResult evaluate(const SupernetWeights& weights, const SpaceSpec& space,
                    const SubnetConfig& cfg, const std::vector<Batch>& eval_batches);

class Trainer {
public:
    explicit Trainer(TrainConfig config);
    static Trainer resume(const std::string& checkpoint_path);

    // Runs the remaining steps, appending one JSONL record per step to
    // <out_dir>/metrics.jsonl and writing checkpoint-<step>.bin files.
    void run(const std::string& out_dir);

    StepRecord step();
    std::int64_t current_step() const { return step_; }
    const TrainConfig& config() const { return config_; }
    const SpaceSpec& space() const { return space_; }
    const SupernetWeights& weights() const { return weights_; }
    const MemoryBank& bank() const { return bank_; }
    const HssSet& hss() const { return hss_; }
    const Dataset& dataset() const { return dataset_; }
    std::vector<Batch> eval_batches() const;

    TrainerSnapshot snapshot() const;
    void save(const std::string& path) const;

private:
    Trainer(TrainConfig config, const TrainerSnapshot* snapshot);

    StepRecord step_sandwich();
    StepRecord step_elastic();
    double lr_at(std::int64_t step) const;
    void train_subnets(const std::vector<SubnetConfig>& cfgs, std::vector<double>& losses);

    TrainConfig config_;
    SpaceSpec space_;
    std::string space_text_;
    Dataset dataset_;
    SupernetWeights weights_;
    OptimizerState opt_;
    ComplexityLadder ladder_;
    LadderState ladder_state_;
    HssSet hss_;
    MemoryBank bank_;
    RngStream sampler_rng_;
    RngStream data_rng_;
    std::int64_t step_ = 0;
};

}  // namespace canas
