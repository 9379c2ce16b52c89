#include "ssmpeft/tasks.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

#include "json.hpp"
#include "ssmpeft/rng.hpp"

namespace ssmpeft {

std::string task_kind_name(TaskKind k) {
    return k == TaskKind::selective_copy ? "selective_copy" : "classification";
}

TaskKind task_kind_from_name(const std::string& s) {
    if (s == "selective_copy") return TaskKind::selective_copy;
    if (s == "classification") return TaskKind::classification;
    throw std::invalid_argument("unknown task kind '" + s + "'");
}

std::string cls_rule_name(ClsRule r) {
    switch (r) {
        case ClsRule::majority_token: return "majority_token";
        case ClsRule::first_last_match: return "first_last_match";
        case ClsRule::marker_parity: return "marker_parity";
    }
    return "?";
}

ClsRule cls_rule_from_name(const std::string& s) {
    if (s == "majority_token") return ClsRule::majority_token;
    if (s == "first_last_match") return ClsRule::first_last_match;
    if (s == "marker_parity") return ClsRule::marker_parity;
    throw std::invalid_argument("unknown classification rule '" + s + "'");
}

int64_t TaskSpec::payload_base() const { return 2 + (vocab - 2) / 2; }
int64_t TaskSpec::payload_count() const { return vocab - payload_base(); }

void TaskSpec::validate() const {
    if (kind == TaskKind::selective_copy) {
        if (vocab < 8) throw std::invalid_argument("selective_copy: vocab must be >= 8");
        if (n_marked < 1 || n_marked >= seq_len)
            throw std::invalid_argument("selective_copy: need 1 <= n_marked < seq_len");
        if (payload_shift < 0 || payload_shift >= payload_count())
            throw std::invalid_argument("selective_copy: payload_shift outside payload alphabet");
    } else {
        if (vocab < 8) throw std::invalid_argument("classification: vocab must be >= 8");
        if (seq_len < 1) throw std::invalid_argument("classification: seq_len must be >= 1");
        if (rule == ClsRule::first_last_match && seq_len < 2)
            throw std::invalid_argument("first_last_match needs seq_len >= 2");
        if (rule == ClsRule::marker_parity && (marker < 3 || marker >= vocab))
            throw std::invalid_argument("marker token outside content alphabet");
    }
}

namespace {

constexpr int64_t kSepCopy = 1;
constexpr int64_t kSepCls = 2;

TaskInstance make_copy(const TaskSpec& s, uint64_t seed) {
    Rng rng(seed * 0x9e3779b97f4a7c15ull + static_cast<uint64_t>(s.version));
    int64_t T = s.seq_len, m = s.n_marked;
    int64_t noise_base = 2, noise_count = s.payload_base() - 2;
    int64_t pay_base = s.payload_base(), pay_count = s.payload_count();

    std::vector<int64_t> pos(static_cast<size_t>(T));
    std::iota(pos.begin(), pos.end(), 0);
    rng.shuffle(pos);
    pos.resize(static_cast<size_t>(m));
    std::sort(pos.begin(), pos.end());

    std::vector<int64_t> seq(static_cast<size_t>(T));
    for (int64_t t = 0; t < T; ++t) seq[t] = noise_base + rng.uniform_int(0, noise_count - 1);
    // payload_shift rotates the alphabet as it appears in the input sequence;
    // the canonical token must still be produced at the output positions
    auto remap = [&](int64_t tok) {
        return pay_base + ((tok - pay_base + s.payload_shift) % pay_count);
    };
    std::vector<int64_t> payload;
    for (int64_t p : pos) {
        int64_t tok = pay_base + rng.uniform_int(0, pay_count - 1);
        seq[p] = remap(tok);
        payload.push_back(tok);
    }

    TaskInstance inst;
    inst.tokens = seq;
    inst.tokens.push_back(kSepCopy);
    for (int64_t i = 0; i + 1 < m; ++i) inst.tokens.push_back(payload[i]);
    int64_t n = static_cast<int64_t>(inst.tokens.size());
    inst.targets.assign(static_cast<size_t>(n), 0);
    inst.mask.assign(static_cast<size_t>(n), 0);
    for (int64_t i = 0; i < m; ++i) {
        inst.targets[T + i] = payload[i];
        inst.mask[T + i] = 1;
    }
    return inst;
}

TaskInstance make_classification(const TaskSpec& s, uint64_t seed) {
    Rng rng(seed * 0xa076bc5c3f2e41d1ull + static_cast<uint64_t>(s.version));
    int64_t T = s.seq_len;
    int64_t base = 3, count = s.vocab - 3;
    int64_t label = rng.uniform_int(0, 1);
    std::vector<int64_t> seq(static_cast<size_t>(T));

    switch (s.rule) {
        case ClsRule::majority_token: {
            int64_t half = count / 2;
            auto tok0 = [&] { return base + rng.uniform_int(0, half - 1); };
            auto tok1 = [&] { return base + half + rng.uniform_int(0, half - 1); };
            int64_t lo1 = label ? T / 2 + 1 : 0;
            int64_t hi1 = label ? T : (T - 1) / 2;
            int64_t c1 = rng.uniform_int(lo1, hi1);
            for (int64_t t = 0; t < T; ++t) seq[t] = t < c1 ? tok1() : tok0();
            rng.shuffle(seq);
            break;
        }
        case ClsRule::first_last_match: {
            for (int64_t t = 0; t < T; ++t) seq[t] = base + rng.uniform_int(0, count - 1);
            if (label)
                seq[T - 1] = seq[0];
            else if (seq[T - 1] == seq[0])
                seq[T - 1] = base + (seq[0] - base + 1 + rng.uniform_int(0, count - 2)) % count;
            break;
        }
        case ClsRule::marker_parity: {
            int64_t max_markers = std::max<int64_t>(label, T / 3);
            int64_t max_k = std::max<int64_t>(0, (max_markers - label) / 2);
            int64_t c = label + 2 * rng.uniform_int(0, max_k);
            for (int64_t t = 0; t < T; ++t) {
                int64_t tok = base + rng.uniform_int(0, count - 1);
                while (tok == s.marker) tok = base + rng.uniform_int(0, count - 1);
                seq[t] = tok;
            }
            std::vector<int64_t> pos(static_cast<size_t>(T));
            std::iota(pos.begin(), pos.end(), 0);
            rng.shuffle(pos);
            for (int64_t i = 0; i < c; ++i) seq[pos[i]] = s.marker;
            break;
        }
    }

    TaskInstance inst;
    inst.tokens = seq;
    inst.tokens.push_back(kSepCls);
    int64_t n = static_cast<int64_t>(inst.tokens.size());
    inst.targets.assign(static_cast<size_t>(n), 0);
    inst.mask.assign(static_cast<size_t>(n), 0);
    inst.targets[n - 1] = label;  // class tokens are ids 0 / 1
    inst.mask[n - 1] = 1;
    return inst;
}

}  // namespace

TaskInstance gen_instance(const TaskSpec& spec, uint64_t seed) {
    spec.validate();
    return spec.kind == TaskKind::selective_copy ? make_copy(spec, seed)
                                                 : make_classification(spec, seed);
}

TaskInstance gen_selective_copy(uint64_t seed, int64_t seq_len, int64_t n_marked, int64_t vocab,
                                int64_t payload_shift) {
    TaskSpec s;
    s.kind = TaskKind::selective_copy;
    s.seq_len = seq_len;
    s.n_marked = n_marked;
    s.vocab = vocab;
    s.payload_shift = payload_shift;
    return gen_instance(s, seed);
}

TaskInstance gen_sequence_classification(uint64_t seed, int64_t seq_len, ClsRule rule,
                                         int64_t vocab, int64_t marker) {
    TaskSpec s;
    s.kind = TaskKind::classification;
    s.seq_len = seq_len;
    s.rule = rule;
    s.vocab = vocab;
    s.marker = marker;
    return gen_instance(s, seed);
}

std::pair<TaskSpec, TaskSpec> domain_shift(const TaskSpec& a, const TaskSpec& b) {
    a.validate();
    b.validate();
    if (a.vocab != b.vocab)
        throw std::invalid_argument("domain_shift: tasks must share one vocabulary");
    if (a == b) throw std::invalid_argument("domain_shift: specs are identical, nothing shifts");
    return {a, b};
}

std::vector<TaskInstance> gen_dataset(const TaskSpec& spec, uint64_t seed_base, int64_t count) {
    std::vector<TaskInstance> out;
    out.reserve(static_cast<size_t>(count));
    for (int64_t i = 0; i < count; ++i)
        out.push_back(gen_instance(spec, seed_base + static_cast<uint64_t>(i)));
    return out;
}

std::string instance_to_jsonl(const TaskInstance& inst) {
    nlohmann::ordered_json o;
    o["tokens"] = inst.tokens;
    o["targets"] = inst.targets;
    std::vector<int> m(inst.mask.begin(), inst.mask.end());
    o["mask"] = m;
    return o.dump();
}

TaskInstance instance_from_jsonl(const std::string& line) {
    auto o = nlohmann::json::parse(line);
    TaskInstance inst;
    inst.tokens = o.at("tokens").get<std::vector<int64_t>>();
    inst.targets = o.at("targets").get<std::vector<int64_t>>();
    auto m = o.at("mask").get<std::vector<int>>();
    inst.mask.assign(m.begin(), m.end());
    return inst;
}

}  // namespace ssmpeft
