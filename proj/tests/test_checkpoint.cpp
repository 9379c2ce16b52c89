#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "ssmpeft/checkpoint.hpp"
#include "ssmpeft/rng.hpp"
#include "ssmpeft/ssm.hpp"

using namespace ssmpeft;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / ("ssmpeft_ckpt_" + std::to_string(::getpid()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string file(const char* name) const { return (path / name).string(); }
};

std::string read_bytes(const std::string& p) {
    std::ifstream f(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

void write_bytes(const std::string& p, const std::string& b) {
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    f << b;
}

}  // namespace

TEST_CASE("round trip preserves every bit and re-saving is byte-identical") {
    TempDir tmp;
    ModelDims dims;
    dims.d_model = 6;
    dims.n_layer = 2;
    dims.d_state = 4;
    dims.vocab = 16;
    Model m = build_model(dims, 123);
    auto params = m.named_params();
    std::string p1 = tmp.file("a.bin");
    save_checkpoint(p1, params);

    Checkpoint ck = load_checkpoint(p1);
    CHECK(ck.tensors.size() == params.size());
    for (auto& [name, t] : params) {
        const Tensor* got = ck.find(name);
        REQUIRE(got != nullptr);
        CHECK(got->shape == t->shape);
        for (int64_t i = 0; i < t->numel(); ++i) CHECK(got->at(i) == t->at(i));
    }

    // save(load(x)) == x byte-for-byte
    std::vector<std::pair<std::string, Tensor*>> reload;
    for (auto& [name, t] : ck.tensors) reload.emplace_back(name, &t);
    std::string p2 = tmp.file("b.bin");
    save_checkpoint(p2, reload);
    CHECK(read_bytes(p1) == read_bytes(p2));

    // loading back into a model restores parameters exactly
    Model m2 = build_model(dims, 999);
    load_checkpoint_into(p1, m2.named_params());
    auto pa = m.named_params();
    auto pb = m2.named_params();
    for (size_t i = 0; i < pa.size(); ++i)
        for (int64_t j = 0; j < pa[i].second->numel(); ++j)
            CHECK(pa[i].second->at(j) == pb[i].second->at(j));
}

TEST_CASE("wrong magic is a format error; truncation is a corruption error") {
    TempDir tmp;
    Tensor t = Tensor::from({3}, {1.0, 2.0, 3.0});
    std::vector<std::pair<std::string, Tensor*>> params = {{"w", &t}};
    std::string p = tmp.file("c.bin");
    save_checkpoint(p, params);

    std::string bytes = read_bytes(p);
    std::string bad_magic = bytes;
    bad_magic[0] = 'X';
    write_bytes(tmp.file("bad.bin"), bad_magic);
    CHECK_THROWS_AS(load_checkpoint(tmp.file("bad.bin")), format_error);

    std::string truncated = bytes.substr(0, bytes.size() - 9);
    write_bytes(tmp.file("short.bin"), truncated);
    CHECK_THROWS_AS(load_checkpoint(tmp.file("short.bin")), corruption_error);

    // truncation must not produce partial state
    try {
        load_checkpoint(tmp.file("short.bin"));
        FAIL("expected corruption_error");
    } catch (const corruption_error&) {
    }
}

TEST_CASE("empty manifest is a valid checkpoint") {
    TempDir tmp;
    std::string p = tmp.file("empty.bin");
    save_checkpoint(p, {});
    Checkpoint ck = load_checkpoint(p);
    CHECK(ck.tensors.empty());
}

TEST_CASE("alignment and duplicate names") {
    TempDir tmp;
    Tensor a = Tensor::from({1}, {1.5});
    Tensor b = Tensor::from({2}, {2.5, 3.5});
    std::vector<std::pair<std::string, Tensor*>> params = {{"z", &b}, {"a", &a}};
    std::string p = tmp.file("d.bin");
    save_checkpoint(p, params);
    Checkpoint ck = load_checkpoint(p);
    // sorted by name
    CHECK(ck.tensors[0].first == "a");
    CHECK(ck.tensors[1].first == "z");

    std::vector<std::pair<std::string, Tensor*>> dup = {{"a", &a}, {"a", &b}};
    CHECK_THROWS_AS(save_checkpoint(tmp.file("e.bin"), dup), std::invalid_argument);
}
