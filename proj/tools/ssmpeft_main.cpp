#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"
#include "ssmpeft/checkpoint.hpp"
#include "ssmpeft/config.hpp"
#include "ssmpeft/theory.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitCheckFailed = 1;
constexpr int kExitUsage = 2;
constexpr int kExitConfig = 3;

std::string report_jsonl(const ssmpeft::EquivalenceReport& r) {
    ordered_json o;
    o["name"] = r.name;
    o["max_abs_error"] = r.max_abs_error;
    o["instances"] = r.instances_checked;
    o["passed"] = r.passed;
    o["worst_seed"] = r.worst_seed;
    return o.dump();
}

uint64_t seed_from_env(uint64_t fallback) {
    if (const char* env = std::getenv("SSMPEFT_SEED")) return std::stoull(env);
    return fallback;
}

void write_file(const std::string& path, const std::string& content) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
    f << content;
}

json load_json_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open '" + path + "'");
    return json::parse(f);
}

std::vector<ssmpeft::ArchConfig> load_extra_archs(const std::string& path) {
    if (path.empty()) return {};
    return ssmpeft::parse_arch_file(load_json_file(path));
}

ssmpeft::AdapterSpec spec_from_flags(const std::string& method, int64_t rank, int64_t vtokens,
                                     int64_t extra_states, std::vector<double> sdt_keep) {
    ssmpeft::AdapterSpec spec = ssmpeft::default_spec(ssmpeft::method_from_name(method));
    if (rank > 0) spec.rank_r = rank;
    if (vtokens > 0) spec.virtual_tokens = vtokens;
    if (extra_states > 0) spec.extra_states = extra_states;
    if (sdt_keep.size() == 2) spec.sdt_keep = {sdt_keep[0], sdt_keep[1]};
    spec.validate();
    return spec;
}

int cmd_verify(uint64_t seed, int64_t instances, const std::string& out_path) {
    auto reports = ssmpeft::run_all_checks(seed, instances);
    std::string body;
    bool all_ok = true;
    for (const auto& r : reports) {
        body += report_jsonl(r) + "\n";
        all_ok = all_ok && r.passed;
    }
    if (!out_path.empty())
        write_file(out_path, body);
    else
        std::cout << body;
    std::cerr << (all_ok ? "verify: all checks passed\n" : "verify: FAILURES present\n");
    return all_ok ? kExitOk : kExitCheckFailed;
}

int cmd_count_params(const std::string& arch_name, const std::string& arch_file,
                     const std::string& method, bool all, const std::string& format,
                     int64_t rank, int64_t vtokens, int64_t extra_states,
                     std::vector<double> sdt_keep) {
    auto extra = load_extra_archs(arch_file);
    ssmpeft::ArchConfig arch = ssmpeft::find_config(arch_name, extra);
    std::vector<ssmpeft::AdapterSpec> specs;
    if (all) {
        for (ssmpeft::Method m : ssmpeft::all_methods())
            specs.push_back(ssmpeft::default_spec(m));
    } else {
        specs.push_back(spec_from_flags(method, rank, vtokens, extra_states, sdt_keep));
    }
    auto rows = ssmpeft::compare_methods(arch, specs);
    std::cout << (format == "csv" ? ssmpeft::render_rows_csv(rows)
                                  : ssmpeft::render_rows_json(rows));
    return kExitOk;
}

int cmd_flops(const std::string& arch_name, const std::string& arch_file,
              const std::string& method, int64_t seq, const std::string& format, int64_t rank,
              int64_t vtokens, int64_t extra_states, std::vector<double> sdt_keep) {
    auto extra = load_extra_archs(arch_file);
    ssmpeft::ArchConfig arch = ssmpeft::find_config(arch_name, extra);
    ssmpeft::AdapterSpec spec = spec_from_flags(method, rank, vtokens, extra_states, sdt_keep);
    ssmpeft::FlopReport r = ssmpeft::estimate_flops(arch, spec, seq);
    if (format == "csv") {
        std::cout << "arch,method,seq_len,base_gmacs,extra_gmacs,overhead_percent\n"
                  << arch.name << "," << ssmpeft::method_name(spec.method) << "," << seq << ","
                  << json(r.base_macs_total / 1e9).dump() << ","
                  << json(r.extra_macs_total / 1e9).dump() << ","
                  << json(100.0 * r.relative_overhead).dump() << "\n";
    } else {
        ordered_json o;
        o["arch"] = arch.name;
        o["method"] = ssmpeft::method_name(spec.method);
        o["seq_len"] = seq;
        o["base_macs_per_token"] = r.base_macs_per_token;
        o["extra_macs_per_token"] = r.adapter_extra_macs_per_token;
        o["base_gmacs"] = r.base_macs_total / 1e9;
        o["extra_gmacs"] = r.extra_macs_total / 1e9;
        o["overhead_percent"] = 100.0 * r.relative_overhead;
        std::cout << o.dump(2) << "\n";
    }
    return kExitOk;
}

int cmd_train(const std::string& config_path, const std::string& arch_file, double lr_override,
              int64_t epochs_override, int64_t seed_override, const std::string& out_override) {
    json raw = load_json_file(config_path);
    auto extra = load_extra_archs(arch_file);
    ssmpeft::ExperimentConfig cfg = ssmpeft::parse_experiment_config(raw, extra);
    if (lr_override > 0) cfg.train_cfg.lr = lr_override;
    if (epochs_override > 0) cfg.train_cfg.epochs = epochs_override;
    if (seed_override >= 0) cfg.train_cfg.seed = static_cast<uint64_t>(seed_override);
    if (!out_override.empty()) cfg.output_dir = out_override;

    fs::create_directories(cfg.output_dir);
    ssmpeft::Model model = ssmpeft::build_model(cfg.arch.dims(), cfg.train_cfg.seed);
    ssmpeft::AdapterState adapter =
        ssmpeft::init_adapter(model, cfg.adapter, cfg.train_cfg.seed + 1);
    ssmpeft::Dataset data =
        ssmpeft::make_dataset(cfg.task, cfg.train_cfg.seed, cfg.train_n, cfg.val_n);

    if (cfg.adapter.method == ssmpeft::Method::sdt) {
        std::vector<ssmpeft::WarmupExample> warm;
        for (size_t i = 0; i < data.train.size() && i < 16; ++i)
            warm.push_back({data.train[i].tokens, data.train[i].targets, data.train[i].mask});
        ssmpeft::select_sdt_mask(model, adapter, warm);
    }
    if (!cfg.train_cfg.grid.empty()) {
        ssmpeft::Dataset probe;
        size_t probe_n = std::min<size_t>(data.train.size(), 64);
        probe.train.assign(data.train.begin(), data.train.begin() + probe_n);
        probe.val = data.val;
        uint64_t seed = cfg.train_cfg.seed;
        ssmpeft::TaskSpec task = cfg.task;
        ssmpeft::ModelDims dims = cfg.arch.dims();
        ssmpeft::AdapterSpec aspec = cfg.adapter;
        auto factory = [&]() {
            ssmpeft::TrainJob job;
            job.model = ssmpeft::build_model(dims, seed);
            job.adapter = ssmpeft::init_adapter(job.model, aspec, seed + 1);
            return job;
        };
        cfg.train_cfg.lr = ssmpeft::grid_search(factory, probe, cfg.train_cfg.grid, cfg.train_cfg);
        std::cerr << "grid search selected lr=" << cfg.train_cfg.lr << "\n";
    }

    ssmpeft::RunMetrics rm = ssmpeft::train(model, adapter, data, cfg.train_cfg);

    std::string metrics;
    for (const auto& e : rm.per_epoch) metrics += ssmpeft::epoch_metrics_jsonl(e) + "\n";
    write_file(cfg.output_dir + "/metrics.jsonl", metrics);
    write_file(cfg.output_dir + "/run_metrics.json",
               ssmpeft::run_metrics_json(rm, ssmpeft::method_name(cfg.adapter.method),
                                         cfg.train_cfg.seed));
    std::vector<std::pair<std::string, ssmpeft::Tensor*>> everything = model.named_params();
    for (auto& [name, t] : adapter.named_params()) everything.emplace_back(name, t);
    ssmpeft::save_checkpoint(cfg.output_dir + "/checkpoint.bin", everything);
    std::cerr << "train: best_epoch=" << rm.best_epoch << " best_val_acc=" << rm.best_val_acc
              << " wall_time_s=" << rm.wall_time_s << "\n";
    return rm.aborted ? kExitCheckFailed : kExitOk;
}

int cmd_report(const std::vector<std::string>& files, const std::string& format) {
    struct Row {
        std::string method;
        double percent;
        double acc;
        uint64_t seed;
    };
    std::vector<Row> rows;
    for (const auto& f : files) {
        json o = load_json_file(f);
        rows.push_back({o.at("method").get<std::string>(), o.at("params_percent").get<double>(),
                        o.at("best_val_acc").get<double>(), o.at("seed").get<uint64_t>()});
    }
    std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
        if (a.percent != b.percent) return a.percent < b.percent;
        if (a.method != b.method) return a.method < b.method;
        return a.seed < b.seed;
    });
    if (format == "csv") {
        std::cout << "method,params_percent,best_val_acc,seed\n";
        for (const auto& r : rows)
            std::cout << r.method << "," << json(r.percent).dump() << "," << json(r.acc).dump()
                      << "," << r.seed << "\n";
    } else {
        ordered_json arr = ordered_json::array();
        for (const auto& r : rows) {
            ordered_json o;
            o["method"] = r.method;
            o["params_percent"] = r.percent;
            o["best_val_acc"] = r.acc;
            o["seed"] = r.seed;
            arr.push_back(o);
        }
        std::cout << arr.dump(2) << "\n";
    }
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"state-space PEFT toolbox"};
    app.require_subcommand(1);

    // verify
    auto* verify = app.add_subcommand("verify", "run the equivalence check suites");
    uint64_t v_seed = 0;
    int64_t v_instances = 100;
    std::string v_out;
    verify->add_option("--seed", v_seed, "base seed");
    verify->add_option("--instances", v_instances, "instances per suite");
    verify->add_option("--out", v_out, "write JSONL reports to this file");

    // shared adapter flags
    std::string arch = "mamba-130m", arch_file, method = "state_offset_h", format = "json";
    int64_t rank = 0, vtokens = 0, extra_states = 0, seq = 128;
    std::vector<double> sdt_keep;
    bool all_methods_flag = false;

    auto* cp = app.add_subcommand("count-params", "parameter accounting for an architecture");
    cp->add_option("--arch", arch, "builtin architecture name");
    cp->add_option("--arch-file", arch_file, "JSON file with extra ArchConfig records");
    cp->add_option("--method", method, "PEFT method");
    cp->add_flag("--all", all_methods_flag, "table over all methods");
    cp->add_option("--format", format, "csv or json");
    cp->add_option("--rank-r", rank, "LoRA / low-rank rank");
    cp->add_option("--virtual-tokens", vtokens, "prompt/prefix virtual tokens");
    cp->add_option("--extra-states", extra_states, "additional-scan states");
    cp->add_option("--sdt-keep", sdt_keep, "SDT keep fractions: channels states")->expected(2);

    auto* fl = app.add_subcommand("flops", "analytic MAC estimate");
    fl->add_option("--arch", arch, "builtin architecture name");
    fl->add_option("--arch-file", arch_file, "JSON file with extra ArchConfig records");
    fl->add_option("--method", method, "PEFT method");
    fl->add_option("--seq", seq, "sequence length");
    fl->add_option("--format", format, "csv or json");
    fl->add_option("--rank-r", rank, "LoRA / low-rank rank");
    fl->add_option("--virtual-tokens", vtokens, "prompt/prefix virtual tokens");
    fl->add_option("--extra-states", extra_states, "additional-scan states");
    fl->add_option("--sdt-keep", sdt_keep, "SDT keep fractions: channels states")->expected(2);

    auto* tr = app.add_subcommand("train", "run an experiment config");
    std::string config_path, out_override;
    double lr_override = 0;
    int64_t epochs_override = 0, seed_override = -1;
    tr->add_option("--config", config_path, "experiment config JSON")->required();
    tr->add_option("--arch-file", arch_file, "JSON file with extra ArchConfig records");
    tr->add_option("--lr", lr_override, "override learning rate");
    tr->add_option("--epochs", epochs_override, "override epoch count");
    tr->add_option("--seed", seed_override, "override seed");
    tr->add_option("--out", out_override, "override output directory");

    auto* rp = app.add_subcommand("report", "aggregate run_metrics.json files");
    std::vector<std::string> report_files;
    rp->add_option("files", report_files, "run_metrics.json files")->required();
    rp->add_option("--format", format, "csv or json");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (*verify) return cmd_verify(seed_from_env(v_seed), v_instances, v_out);
        if (*cp)
            return cmd_count_params(arch, arch_file, method, all_methods_flag, format, rank,
                                    vtokens, extra_states, sdt_keep);
        if (*fl)
            return cmd_flops(arch, arch_file, method, seq, format, rank, vtokens, extra_states,
                             sdt_keep);
        if (*tr)
            return cmd_train(config_path, arch_file, lr_override, epochs_override, seed_override,
                             out_override);
        if (*rp) return cmd_report(report_files, format);
    } catch (const ssmpeft::ConfigError& e) {
        std::cerr << "config error at " << e.where << ": " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitCheckFailed;
    }
    return kExitUsage;
}
