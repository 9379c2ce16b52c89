#include "ssmpeft/config.hpp"

#include <cstdlib>

namespace ssmpeft {

namespace {

using nlohmann::json;

const json& require(const json& o, const std::string& key, const std::string& path) {
    if (!o.is_object()) throw ConfigError(path, "expected an object");
    auto it = o.find(key);
    if (it == o.end()) throw ConfigError(path + "/" + key, "required field is missing");
    return *it;
}

int64_t get_int(const json& v, const std::string& path, int64_t lo, int64_t hi) {
    if (!v.is_number_integer())
        throw ConfigError(path, "expected an integer");
    int64_t x = v.get<int64_t>();
    if (x < lo || x > hi)
        throw ConfigError(path, "value " + std::to_string(x) + " outside [" + std::to_string(lo) +
                                    ", " + std::to_string(hi) + "]");
    return x;
}

double get_num(const json& v, const std::string& path, double lo, double hi) {
    if (!v.is_number()) throw ConfigError(path, "expected a number");
    double x = v.get<double>();
    if (!(x >= lo && x <= hi))
        throw ConfigError(path, "value outside [" + std::to_string(lo) + ", " +
                                    std::to_string(hi) + "]");
    return x;
}

std::string get_str(const json& v, const std::string& path) {
    if (!v.is_string()) throw ConfigError(path, "expected a string");
    return v.get<std::string>();
}

ArchConfig parse_arch(const json& v, const std::string& path,
                      const std::vector<ArchConfig>& extra) {
    if (v.is_string()) {
        try {
            return find_config(v.get<std::string>(), extra);
        } catch (const std::invalid_argument& e) {
            throw ConfigError(path, e.what());
        }
    }
    if (!v.is_object()) throw ConfigError(path, "expected a builtin name or an object");
    ArchConfig a;
    a.name = get_str(require(v, "name", path), path + "/name");
    a.d_model = get_int(require(v, "d_model", path), path + "/d_model", 1, 65536);
    a.n_layer = get_int(require(v, "n_layer", path), path + "/n_layer", 0, 4096);
    a.d_state = get_int(require(v, "d_state", path), path + "/d_state", 1, 4096);
    a.expand = v.contains("expand") ? get_int(v["expand"], path + "/expand", 1, 16) : 2;
    a.dt_rank = v.contains("dt_rank") ? get_int(v["dt_rank"], path + "/dt_rank", 0, 65536) : 0;
    a.vocab = get_int(require(v, "vocab", path), path + "/vocab", 2, 1000000);
    a.conv_width =
        v.contains("conv_width") ? get_int(v["conv_width"], path + "/conv_width", 1, 64) : 4;
    return a;
}

}  // namespace

std::vector<ArchConfig> parse_arch_file(const json& j) {
    if (!j.is_array()) throw ConfigError("/", "arch file must be a JSON array of configs");
    std::vector<ArchConfig> out;
    for (size_t i = 0; i < j.size(); ++i)
        out.push_back(parse_arch(j[i], "/" + std::to_string(i), {}));
    return out;
}

AdapterSpec parse_adapter_spec(const json& v, const std::string& path) {
    AdapterSpec spec;
    if (!v.is_object()) throw ConfigError(path, "expected an object");
    try {
        spec.method = method_from_name(get_str(require(v, "method", path), path + "/method"));
    } catch (const std::invalid_argument& e) {
        throw ConfigError(path + "/method", e.what());
    }
    if (v.contains("rank_r")) spec.rank_r = get_int(v["rank_r"], path + "/rank_r", 1, 65536);
    if (v.contains("virtual_tokens"))
        spec.virtual_tokens = get_int(v["virtual_tokens"], path + "/virtual_tokens", 1, 65536);
    if (v.contains("extra_states"))
        spec.extra_states = get_int(v["extra_states"], path + "/extra_states", 1, 65536);
    if (v.contains("sdt_keep")) {
        const json& k = v["sdt_keep"];
        if (!k.is_array() || k.size() != 2)
            throw ConfigError(path + "/sdt_keep", "expected [channel_fraction, state_fraction]");
        spec.sdt_keep = {get_num(k[0], path + "/sdt_keep/0", 0.0, 1.0),
                         get_num(k[1], path + "/sdt_keep/1", 0.0, 1.0)};
    }
    try {
        spec.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(path, e.what());
    }
    return spec;
}

TaskSpec parse_task_spec(const json& v, const std::string& path) {
    TaskSpec t;
    if (!v.is_object()) throw ConfigError(path, "expected an object");
    try {
        t.kind = task_kind_from_name(get_str(require(v, "kind", path), path + "/kind"));
    } catch (const std::invalid_argument& e) {
        throw ConfigError(path + "/kind", e.what());
    }
    if (v.contains("seq_len")) t.seq_len = get_int(v["seq_len"], path + "/seq_len", 1, 4096);
    if (v.contains("n_marked")) t.n_marked = get_int(v["n_marked"], path + "/n_marked", 1, 4096);
    if (v.contains("vocab")) t.vocab = get_int(v["vocab"], path + "/vocab", 8, 65536);
    if (v.contains("payload_shift"))
        t.payload_shift = get_int(v["payload_shift"], path + "/payload_shift", 0, 65536);
    if (v.contains("rule")) {
        try {
            t.rule = cls_rule_from_name(get_str(v["rule"], path + "/rule"));
        } catch (const std::invalid_argument& e) {
            throw ConfigError(path + "/rule", e.what());
        }
    }
    if (v.contains("marker")) t.marker = get_int(v["marker"], path + "/marker", 3, 65536);
    try {
        t.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(path, e.what());
    }
    return t;
}

ExperimentConfig parse_experiment_config(const json& j, const std::vector<ArchConfig>& extra) {
    if (!j.is_object()) throw ConfigError("/", "experiment config must be a JSON object");
    ExperimentConfig c;
    c.arch = parse_arch(require(j, "arch", "/"), "/arch", extra);
    c.adapter = parse_adapter_spec(require(j, "adapter", "/"), "/adapter");
    c.task = parse_task_spec(require(j, "task", "/"), "/task");

    const json& tr = require(j, "train", "/");
    if (!tr.is_object()) throw ConfigError("/train", "expected an object");
    c.train_cfg.lr = get_num(require(tr, "lr", "/train"), "/train/lr", 1e-12, 1e3);
    c.train_cfg.epochs = get_int(require(tr, "epochs", "/train"), "/train/epochs", 1, 100000);
    if (tr.contains("batch_size"))
        c.train_cfg.batch_size = get_int(tr["batch_size"], "/train/batch_size", 1, 65536);
    if (tr.contains("seed"))
        c.train_cfg.seed = static_cast<uint64_t>(get_int(tr["seed"], "/train/seed", 0,
                                                         std::numeric_limits<int64_t>::max()));
    if (tr.contains("early_stopping")) {
        if (!tr["early_stopping"].is_boolean())
            throw ConfigError("/train/early_stopping", "expected a boolean");
        c.train_cfg.early_stopping = tr["early_stopping"].get<bool>();
    }
    if (tr.contains("patience"))
        c.train_cfg.patience = get_int(tr["patience"], "/train/patience", 1, 100000);
    if (tr.contains("weight_decay"))
        c.train_cfg.weight_decay = get_num(tr["weight_decay"], "/train/weight_decay", 0.0, 10.0);
    if (tr.contains("threads"))
        c.train_cfg.threads = get_int(tr["threads"], "/train/threads", 1, 256);
    if (tr.contains("grid")) {
        if (!tr["grid"].is_array()) throw ConfigError("/train/grid", "expected an array");
        for (size_t i = 0; i < tr["grid"].size(); ++i)
            c.train_cfg.grid.push_back(
                get_num(tr["grid"][i], "/train/grid/" + std::to_string(i), 1e-12, 1e3));
    }
    if (const char* env = std::getenv("SSMPEFT_SEED")) {
        try {
            c.train_cfg.seed = std::stoull(env);
        } catch (...) {
            throw ConfigError("/train/seed", "SSMPEFT_SEED is not a valid integer");
        }
    }

    if (j.contains("data")) {
        const json& d = j["data"];
        if (!d.is_object()) throw ConfigError("/data", "expected an object");
        if (d.contains("train_n")) c.train_n = get_int(d["train_n"], "/data/train_n", 1, 1000000);
        if (d.contains("val_n")) c.val_n = get_int(d["val_n"], "/data/val_n", 1, 1000000);
    }
    if (j.contains("output_dir")) c.output_dir = get_str(j["output_dir"], "/output_dir");

    if (c.task.vocab != c.arch.vocab)
        throw ConfigError("/task/vocab", "task vocabulary must match the architecture vocabulary");
    int64_t total = backbone_total_params(c.arch);
    if (total > 5'000'000)
        throw ConfigError("/arch", "architecture has " + std::to_string(total) +
                                       " parameters; the trainer is desk-scale (<= 5M)");
    return c;
}

}  // namespace ssmpeft
