#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace ssmpeft {

// One training example. logits[t] is scored against targets[t] wherever
// mask[t] is set (next-token framing with teacher forcing).
struct TaskInstance {
    std::vector<int64_t> tokens;
    std::vector<int64_t> targets;
    std::vector<uint8_t> mask;
};

enum class TaskKind { selective_copy, classification };
enum class ClsRule { majority_token, first_last_match, marker_parity };

std::string task_kind_name(TaskKind k);
TaskKind task_kind_from_name(const std::string& s);
std::string cls_rule_name(ClsRule r);
ClsRule cls_rule_from_name(const std::string& s);

// Vocabulary layout:
//   selective_copy: 1 = separator, [2, 2+noise) noise, [2+noise, vocab) payload
//   classification: 0/1 = class tokens, 2 = separator, [3, vocab) content
struct TaskSpec {
    TaskKind kind = TaskKind::selective_copy;
    int64_t seq_len = 24;
    int64_t n_marked = 3;
    int64_t vocab = 32;
    int64_t payload_shift = 0;  // cyclic remap of copy outputs within the payload alphabet
    ClsRule rule = ClsRule::majority_token;
    int64_t marker = 3;
    int64_t version = 1;  // generator version, bumped on any distribution change

    bool operator==(const TaskSpec&) const = default;
    void validate() const;
    int64_t payload_base() const;
    int64_t payload_count() const;
};

TaskInstance gen_instance(const TaskSpec& spec, uint64_t seed);
TaskInstance gen_selective_copy(uint64_t seed, int64_t seq_len, int64_t n_marked, int64_t vocab,
                                int64_t payload_shift = 0);
TaskInstance gen_sequence_classification(uint64_t seed, int64_t seq_len, ClsRule rule,
                                         int64_t vocab, int64_t marker = 3);

// validates that the two specs form a usable pretrain -> finetune pair
std::pair<TaskSpec, TaskSpec> domain_shift(const TaskSpec& a, const TaskSpec& b);

std::vector<TaskInstance> gen_dataset(const TaskSpec& spec, uint64_t seed_base, int64_t count);

std::string instance_to_jsonl(const TaskInstance& inst);
TaskInstance instance_from_jsonl(const std::string& line);

}  // namespace ssmpeft
