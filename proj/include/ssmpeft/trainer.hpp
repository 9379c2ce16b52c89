#pragma once

#include <functional>
#include <map>

#include "ssmpeft/adapters.hpp"
#include "ssmpeft/tasks.hpp"

namespace ssmpeft {

struct TrainConfig {
    double lr = 1e-3;
    int64_t epochs = 10;
    int64_t batch_size = 16;
    uint64_t seed = 0;
    bool early_stopping = true;
    int64_t patience = 5;  // epochs without val-loss improvement
    double weight_decay = 0.01;
    int64_t threads = 1;
    std::vector<double> grid;  // optional learning-rate grid
};

struct EpochMetrics {
    int64_t epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double val_acc = 0.0;
};

struct RunMetrics {
    std::vector<EpochMetrics> per_epoch;
    int64_t best_epoch = -1;
    double best_val_loss = 0.0;
    double best_val_acc = 0.0;
    int64_t trainable = 0;
    int64_t total = 0;
    double percent = 0.0;
    bool aborted = false;
    double wall_time_s = 0.0;  // informational; kept out of the serialized record
};

std::string epoch_metrics_jsonl(const EpochMetrics& m);
std::string run_metrics_json(const RunMetrics& m, const std::string& method, uint64_t seed);

// linear decay: base_lr * (1 - step / total_steps)
double lr_at(int64_t step, int64_t total_steps, double base_lr);

// Decoupled weight decay; applied only to weight matrices (decay is skipped
// for 1-D parameters and for adapter offsets / virtual tokens).
class AdamW {
  public:
    explicit AdamW(double lr, double weight_decay = 0.01, double beta1 = 0.9,
                   double beta2 = 0.999, double eps = 1e-8);
    void step(std::vector<std::pair<std::string, Tensor*>>& params, double lr_now);

  private:
    struct Slot {
        std::vector<double> m, v;
    };
    std::vector<Slot> slots_;
    int64_t t_ = 0;
    double lr_, wd_, beta1_, beta2_, eps_;
};

bool weight_decay_applies(const std::string& name, const Tensor& t);

struct Dataset {
    std::vector<TaskInstance> train, val;
};
Dataset make_dataset(const TaskSpec& spec, uint64_t seed, int64_t train_n, int64_t val_n);

struct EvalResult {
    double loss = 0.0;
    double accuracy = 0.0;
};
EvalResult evaluate(Model& m, AdapterState& a, const std::vector<TaskInstance>& data);

RunMetrics train(Model& m, AdapterState& a, const Dataset& data, const TrainConfig& cfg);

// Fresh model + adapter per candidate; one epoch on a probe subset, returns the
// learning rate with the lowest mean training loss (diverged candidates skipped).
struct TrainJob {
    Model model;
    AdapterState adapter;
};
using ModelFactory = std::function<TrainJob()>;
double grid_search(const ModelFactory& factory, const Dataset& probe,
                   const std::vector<double>& grid, const TrainConfig& base_cfg);

// ---- pretrain -> adapt benchmark ------------------------------------------------

struct AdaptBenchConfig {
    ModelDims dims;
    TaskSpec task_a, task_b;
    int64_t pretrain_n = 512, pretrain_val_n = 64, pretrain_epochs = 20;
    double pretrain_lr = 2e-3;
    int64_t adapt_n = 192, adapt_val_n = 96, adapt_epochs = 12;
    int64_t batch_size = 16;
    int64_t threads = 1;
    int64_t prompt_tokens = 8;
    std::vector<uint64_t> seeds = {0, 1, 2};
    std::vector<Method> methods;
    std::map<Method, double> adapt_lr;
};

struct AdaptBenchResult {
    // method -> per-seed best val accuracy on task B, plus the mean
    std::map<std::string, std::vector<double>> per_seed_acc;
    std::map<std::string, double> mean_acc;
    std::vector<double> pretrain_acc_a;  // per seed, on task A validation
    std::vector<double> zero_shot_acc_b;  // per seed, before adaptation
};
AdaptBenchResult run_adaptation_benchmark(const AdaptBenchConfig& cfg);

}  // namespace ssmpeft
