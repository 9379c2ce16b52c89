#include "ssmpeft/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <thread>

#include "json.hpp"
#include "ssmpeft/analysis.hpp"
#include "ssmpeft/rng.hpp"

namespace ssmpeft {

double lr_at(int64_t step, int64_t total_steps, double base_lr) {
    if (step < 0 || step > total_steps)
        throw std::invalid_argument("lr_at: step outside [0, total_steps]");
    if (total_steps == 0) return base_lr;
    return base_lr * (1.0 - static_cast<double>(step) / static_cast<double>(total_steps));
}

bool weight_decay_applies(const std::string& name, const Tensor& t) {
    if (t.rank() < 2) return false;
    static const char* exempt[] = {"h_prime", "y_prime", "h0_prime", "prompt", "prefix"};
    for (const char* e : exempt)
        if (name.find(e) != std::string::npos) return false;
    return true;
}

AdamW::AdamW(double lr, double weight_decay, double beta1, double beta2, double eps)
    : lr_(lr), wd_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void AdamW::step(std::vector<std::pair<std::string, Tensor*>>& params, double lr_now) {
    if (slots_.empty()) slots_.resize(params.size());
    if (slots_.size() != params.size())
        throw std::invalid_argument("AdamW::step: parameter list changed size");
    ++t_;
    double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (size_t pi = 0; pi < params.size(); ++pi) {
        auto& [name, p] = params[pi];
        if (!p->grad) continue;
        auto& g = *p->grad;
        auto& slot = slots_[pi];
        if (slot.m.empty()) {
            slot.m.assign(g.size(), 0.0);
            slot.v.assign(g.size(), 0.0);
        }
        double wd = weight_decay_applies(name, *p) ? wd_ : 0.0;
        auto& w = *p->data;
        for (size_t i = 0; i < g.size(); ++i) {
            if (std::isnan(g[i]))
                throw std::runtime_error("AdamW: NaN gradient in parameter '" + name + "'");
            slot.m[i] = beta1_ * slot.m[i] + (1.0 - beta1_) * g[i];
            slot.v[i] = beta2_ * slot.v[i] + (1.0 - beta2_) * g[i] * g[i];
            double mhat = slot.m[i] / bc1;
            double vhat = slot.v[i] / bc2;
            w[i] -= lr_now * (mhat / (std::sqrt(vhat) + eps_) + wd * w[i]);
        }
    }
}

Dataset make_dataset(const TaskSpec& spec, uint64_t seed, int64_t train_n, int64_t val_n) {
    Dataset d;
    d.train = gen_dataset(spec, seed * 1000003ull + 1, train_n);
    d.val = gen_dataset(spec, seed * 1000003ull + 700001ull, val_n);
    return d;
}

namespace {

struct SeqResult {
    double loss = 0.0;
    int64_t correct = 0, masked = 0;
};

SeqResult eval_one(Model& m, AdapterState& a, const TaskInstance& inst) {
    Tensor logits = adapted_forward(m, a, inst.tokens);
    SeqResult r;
    r.loss = cross_entropy_logits(logits, inst.targets, inst.mask).scalar_value();
    int64_t V = logits.shape[1];
    for (size_t t = 0; t < inst.mask.size(); ++t) {
        if (!inst.mask[t]) continue;
        int64_t best = 0;
        for (int64_t v = 1; v < V; ++v)
            if (logits.at2(static_cast<int64_t>(t), v) > logits.at2(static_cast<int64_t>(t), best))
                best = v;
        r.masked += 1;
        r.correct += best == inst.targets[t] ? 1 : 0;
    }
    return r;
}

// forward/backward for a contiguous index range; tapes are kept so gradients
// can later be reduced in sequence order regardless of thread count
void run_range(Model& m, AdapterState& a, const std::vector<TaskInstance>& data,
               const std::vector<size_t>& idx, size_t lo, size_t hi,
               std::vector<std::unique_ptr<Tape>>& tapes, std::vector<double>& losses) {
    for (size_t k = lo; k < hi; ++k) {
        const TaskInstance& inst = data[idx[k]];
        auto tape = std::make_unique<Tape>();
        Tensor logits = adapted_forward(m, a, inst.tokens, tape.get());
        Tensor loss = cross_entropy_logits(logits, inst.targets, inst.mask);
        losses[k] = loss.scalar_value();
        if (std::isfinite(losses[k])) tape->backward(loss);
        tapes[k] = std::move(tape);
    }
}

struct Snapshot {
    std::vector<std::vector<double>> values;
};

Snapshot snapshot_params(std::vector<std::pair<std::string, Tensor*>>& params) {
    Snapshot s;
    for (auto& [name, p] : params) s.values.push_back(*p->data);
    return s;
}

void restore_params(std::vector<std::pair<std::string, Tensor*>>& params, const Snapshot& s) {
    for (size_t i = 0; i < params.size(); ++i) *params[i].second->data = s.values[i];
}

}  // namespace

EvalResult evaluate(Model& m, AdapterState& a, const std::vector<TaskInstance>& data) {
    EvalResult r;
    int64_t correct = 0, masked = 0;
    for (const auto& inst : data) {
        SeqResult s = eval_one(m, a, inst);
        r.loss += s.loss;
        correct += s.correct;
        masked += s.masked;
    }
    if (!data.empty()) r.loss /= static_cast<double>(data.size());
    r.accuracy = masked > 0 ? static_cast<double>(correct) / static_cast<double>(masked) : 0.0;
    return r;
}

RunMetrics train(Model& m, AdapterState& a, const Dataset& data, const TrainConfig& cfg) {
    if (!(cfg.lr > 0.0)) throw std::invalid_argument("train: lr must be positive");
    if (cfg.batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
    auto t_start = std::chrono::steady_clock::now();

    auto params = trainable_params(m, a);
    ParamReport pr = trainable_parameter_report(m, a);
    AdamW opt(cfg.lr, cfg.weight_decay);
    Rng rng(cfg.seed ^ 0x5851f42d4c957f2dull);

    RunMetrics rm;
    rm.trainable = pr.trainable;
    rm.total = pr.total;
    rm.percent = pr.percent;
    rm.best_val_loss = std::numeric_limits<double>::infinity();

    int64_t n = static_cast<int64_t>(data.train.size());
    int64_t batches = params.empty() ? 0 : (n + cfg.batch_size - 1) / cfg.batch_size;
    int64_t total_steps = cfg.epochs * std::max<int64_t>(batches, 1);
    int64_t step = 0;

    Snapshot best = snapshot_params(params);
    int64_t since_improve = 0;
    double best_loss_seen = std::numeric_limits<double>::infinity();
    bool aborted = false;

    std::vector<size_t> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);

    for (int64_t epoch = 0; epoch < cfg.epochs && !aborted; ++epoch) {
        rng.shuffle(order);
        double epoch_loss = 0.0;
        int64_t seen = 0;
        for (int64_t b = 0; b < batches; ++b) {
            size_t lo = static_cast<size_t>(b * cfg.batch_size);
            size_t hi = std::min<size_t>(lo + static_cast<size_t>(cfg.batch_size),
                                         static_cast<size_t>(n));
            size_t bs = hi - lo;
            std::vector<std::unique_ptr<Tape>> tapes(bs);
            std::vector<double> losses(bs, 0.0);
            std::vector<size_t> idx(order.begin() + static_cast<int64_t>(lo),
                                    order.begin() + static_cast<int64_t>(hi));
            int64_t workers = std::max<int64_t>(1, std::min<int64_t>(cfg.threads,
                                                                     static_cast<int64_t>(bs)));
            if (workers == 1) {
                run_range(m, a, data.train, idx, 0, bs, tapes, losses);
            } else {
                std::vector<std::thread> threads;
                size_t chunk = (bs + static_cast<size_t>(workers) - 1) / static_cast<size_t>(workers);
                for (int64_t w = 0; w < workers; ++w) {
                    size_t wl = static_cast<size_t>(w) * chunk;
                    size_t wh = std::min(bs, wl + chunk);
                    if (wl >= wh) break;
                    threads.emplace_back([&, wl, wh] {
                        run_range(m, a, data.train, idx, wl, wh, tapes, losses);
                    });
                }
                for (auto& th : threads) th.join();
            }
            double batch_loss = 0.0;
            for (double l : losses) batch_loss += l;
            batch_loss /= static_cast<double>(bs);
            if (!std::isfinite(batch_loss)) {
                aborted = true;
                break;
            }
            for (auto& [name, p] : params) p->zero_grad();
            // fixed reduction order: sequence index order within the batch
            for (size_t k = 0; k < bs; ++k)
                tapes[k]->accumulate_leaf_grads(1.0 / static_cast<double>(bs));
            tapes.clear();
            apply_grad_masks(m, a);
            opt.step(params, lr_at(step, total_steps, cfg.lr));
            ++step;
            epoch_loss += batch_loss * static_cast<double>(bs);
            seen += static_cast<int64_t>(bs);
        }
        if (aborted) break;

        EpochMetrics em;
        em.epoch = epoch;
        em.train_loss = seen > 0 ? epoch_loss / static_cast<double>(seen)
                                 : evaluate(m, a, data.train).loss;
        EvalResult ev = evaluate(m, a, data.val);
        em.val_loss = ev.loss;
        em.val_acc = ev.accuracy;
        rm.per_epoch.push_back(em);

        bool better_primary = ev.accuracy > rm.best_val_acc ||
                              (ev.accuracy == rm.best_val_acc && ev.loss < rm.best_val_loss);
        if (rm.best_epoch < 0 || better_primary) {
            rm.best_epoch = epoch;
            rm.best_val_acc = ev.accuracy;
            rm.best_val_loss = ev.loss;
            best = snapshot_params(params);
        }
        // early stopping watches validation loss
        if (ev.loss < best_loss_seen) {
            best_loss_seen = ev.loss;
            since_improve = 0;
        } else {
            ++since_improve;
        }
        if (cfg.early_stopping && since_improve >= cfg.patience) break;
    }

    restore_params(params, best);  // keep the best-epoch checkpoint
    rm.aborted = aborted;
    rm.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start)
                         .count();
    return rm;
}

double grid_search(const ModelFactory& factory, const Dataset& probe,
                   const std::vector<double>& grid, const TrainConfig& base_cfg) {
    if (grid.empty()) throw std::invalid_argument("grid_search: empty grid");
    double best_lr = 0.0;
    double best_loss = std::numeric_limits<double>::infinity();
    for (double lr : grid) {
        TrainJob job = factory();
        TrainConfig cfg = base_cfg;
        cfg.lr = lr;
        cfg.epochs = 1;
        cfg.early_stopping = false;
        RunMetrics rm = train(job.model, job.adapter, probe, cfg);
        if (rm.aborted || rm.per_epoch.empty()) continue;
        double loss = rm.per_epoch.back().train_loss;
        if (!std::isfinite(loss)) continue;
        if (loss < best_loss) {
            best_loss = loss;
            best_lr = lr;
        }
    }
    if (!(best_loss < std::numeric_limits<double>::infinity())) {
        std::string msg = "grid_search: every candidate diverged; grid =";
        for (double lr : grid) msg += " " + std::to_string(lr);
        throw std::runtime_error(msg);
    }
    return best_lr;
}

std::string epoch_metrics_jsonl(const EpochMetrics& m) {
    nlohmann::ordered_json o;
    o["epoch"] = m.epoch;
    o["train_loss"] = m.train_loss;
    o["val_loss"] = m.val_loss;
    o["val_acc"] = m.val_acc;
    return o.dump();
}

std::string run_metrics_json(const RunMetrics& m, const std::string& method, uint64_t seed) {
    nlohmann::ordered_json o;
    o["method"] = method;
    o["seed"] = seed;
    o["trainable"] = m.trainable;
    o["total"] = m.total;
    o["params_percent"] = m.percent;
    o["best_epoch"] = m.best_epoch;
    o["best_val_loss"] = m.best_val_loss;
    o["best_val_acc"] = m.best_val_acc;
    o["aborted"] = m.aborted;
    nlohmann::ordered_json eps = nlohmann::ordered_json::array();
    for (const auto& e : m.per_epoch) {
        nlohmann::ordered_json eo;
        eo["epoch"] = e.epoch;
        eo["train_loss"] = e.train_loss;
        eo["val_loss"] = e.val_loss;
        eo["val_acc"] = e.val_acc;
        eps.push_back(eo);
    }
    o["epochs"] = eps;
    return o.dump(2) + "\n";
}

AdaptBenchResult run_adaptation_benchmark(const AdaptBenchConfig& cfg) {
    domain_shift(cfg.task_a, cfg.task_b);
    AdaptBenchResult res;
    for (uint64_t seed : cfg.seeds) {
        // pretrain on task A with everything trainable
        Model base = build_model(cfg.dims, seed * 7919ull + 11ull);
        AdapterSpec full;
        full.method = Method::full_all;
        AdapterState full_state = init_adapter(base, full, seed);
        Dataset data_a = make_dataset(cfg.task_a, seed * 31ull + 5ull, cfg.pretrain_n,
                                      cfg.pretrain_val_n);
        TrainConfig pre_cfg;
        pre_cfg.lr = cfg.pretrain_lr;
        pre_cfg.epochs = cfg.pretrain_epochs;
        pre_cfg.batch_size = cfg.batch_size;
        pre_cfg.seed = seed;
        pre_cfg.threads = cfg.threads;
        pre_cfg.early_stopping = false;
        train(base, full_state, data_a, pre_cfg);
        res.pretrain_acc_a.push_back(evaluate(base, full_state, data_a.val).accuracy);

        Dataset data_b = make_dataset(cfg.task_b, seed * 61ull + 13ull, cfg.adapt_n,
                                      cfg.adapt_val_n);
        {
            AdapterSpec frozen;
            frozen.method = Method::full_s6;  // hooks-free forward for the zero-shot readout
            AdapterState fs = init_adapter(base, frozen, seed);
            res.zero_shot_acc_b.push_back(evaluate(base, fs, data_b.val).accuracy);
        }

        for (Method method : cfg.methods) {
            Model model = base;  // tensors share buffers; deep-copy below
            for (auto& [name, p] : model.named_params()) {
                p->data = std::make_shared<std::vector<double>>(*p->data);
                p->grad.reset();
            }
            AdapterSpec spec = default_spec(method);
            if (method == Method::prompt_tuning || method == Method::prefix_tuning)
                spec.virtual_tokens = cfg.prompt_tokens;
            AdapterState st = init_adapter(model, spec, seed + 101ull);
            TrainConfig acfg;
            auto it = cfg.adapt_lr.find(method);
            acfg.lr = it != cfg.adapt_lr.end() ? it->second : 1e-2;
            acfg.epochs = cfg.adapt_epochs;
            acfg.batch_size = cfg.batch_size;
            acfg.seed = seed + 997ull;
            acfg.threads = cfg.threads;
            acfg.early_stopping = false;
            RunMetrics rm = train(model, st, data_b, acfg);
            res.per_seed_acc[method_name(method)].push_back(rm.best_val_acc);
        }
    }
    for (auto& [name, v] : res.per_seed_acc) {
        double s = 0.0;
        for (double x : v) s += x;
        res.mean_acc[name] = v.empty() ? 0.0 : s / static_cast<double>(v.size());
    }
    return res;
}

}  // namespace ssmpeft
