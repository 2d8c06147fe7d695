#include <cmath>
#include <fstream>
#include <limits>

#include "doctest.h"
#include "json.hpp"
#include "loraxs/errors.hpp"
#include "loraxs/experiments.hpp"
#include "loraxs/registry.hpp"
#include "loraxs/tensor_io.hpp"
#include "test_support.hpp"

using namespace loraxs;
using loraxs::testing::random_matrix;
using loraxs::testing::rel_frobenius;
using loraxs::testing::TempDir;
namespace fs = std::filesystem;

namespace {

struct Fixture {
    WeightSet base;
    AdapterSet adapters;
};

Fixture make_fixture(std::size_t modules, std::size_t n, std::size_t rank, std::uint64_t seed, double sigma = 0.1) {
    Fixture f;
    for (std::size_t i = 0; i < modules; ++i) {
        const std::string name = "layer" + std::to_string(i) + ".q";
        f.base[name] = random_matrix(n, n, seed * 100 + i);
        if (i % 2 == 0) {
            f.adapters.emplace(name, init_loraxs_svd(f.base[name], rank, 8.0, sigma, seed + i, seed + 50 + i));
        } else {
            f.adapters.emplace(name, init_loraxs_random(n, n, rank, 8.0, sigma, seed + i));
        }
    }
    return f;
}

std::uint64_t metadata_length(const std::vector<std::uint8_t>& bytes) { return read_u64_le(bytes.data() + 8); }

void flip_byte(const fs::path& p, std::uint64_t offset) {
    std::fstream f(p, std::ios::in | std::ios::out | std::ios::binary);
    f.seekg(static_cast<std::streamoff>(offset));
    char c = 0;
    f.read(&c, 1);
    c = static_cast<char>(c ^ 0x01);
    f.seekp(static_cast<std::streamoff>(offset));
    f.write(&c, 1);
}

}  // namespace

TEST_CASE("save: file size follows the layout") {
    TempDir dir("reg");
    auto f = make_fixture(3, 12, 4, 1);
    for (auto dtype : {StorageDtype::f32, StorageDtype::f64}) {
        const fs::path p = dir.path() / ("ck-" + std::string(to_string(dtype)));
        save_checkpoint(f.adapters, CheckpointMeta{"base-1", dtype, false}, p);
        const auto bytes = read_file_bytes(p);
        const std::uint64_t payload = 3 * 16 * dtype_bytes(dtype);
        CHECK(bytes.size() == 4 + 4 + 8 + metadata_length(bytes) + payload + 32);
        CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "LXSC");
    }
}

TEST_CASE("save: identical adapters give identical ids") {
    TempDir dir("reg");
    auto f1 = make_fixture(2, 10, 3, 7);
    auto f2 = make_fixture(2, 10, 3, 7);
    const auto id1 = save_checkpoint(f1.adapters, CheckpointMeta{"m", StorageDtype::f64, false}, dir.path() / "a");
    const auto id2 = save_checkpoint(f2.adapters, CheckpointMeta{"m", StorageDtype::f64, false}, dir.path() / "b");
    CHECK(id1 == id2);
    CHECK(id1.size() == 64);
    f2.adapters.begin()->second.latent()(0, 0) += 1e-9;
    CHECK(save_checkpoint(f2.adapters, CheckpointMeta{"m", StorageDtype::f64, false}, dir.path() / "c") != id1);
}

TEST_CASE("save: rank 16, 48 modules, f32 payload is 49,152 bytes") {
    auto f = make_fixture(48, 16, 16, 3);
    const auto ck = make_checkpoint(f.adapters, CheckpointMeta{"roberta", StorageDtype::f32, false});
    const auto bytes = encode_checkpoint(ck);
    CHECK(bytes.size() - 16 - metadata_length(bytes) - 32 == 49'152);
}

TEST_CASE("save: f32 overflow and bad paths") {
    auto f = make_fixture(1, 6, 2, 2);
    f.adapters.begin()->second.latent()(0, 1) = 1e300;
    CHECK_THROWS_AS(make_checkpoint(f.adapters, CheckpointMeta{"m", StorageDtype::f32, false}), SerializationError);
    CHECK_NOTHROW(make_checkpoint(f.adapters, CheckpointMeta{"m", StorageDtype::f64, false}));
    CHECK_THROWS_AS(make_checkpoint(AdapterSet{}, CheckpointMeta{}), ParameterError);
    auto g = make_fixture(1, 6, 2, 2);
    try {
        save_checkpoint(g.adapters, CheckpointMeta{}, "/nonexistent-dir/x/ck.lxsc");
        FAIL("expected an I/O error");
    } catch (const IoError& e) {
        CHECK(std::string(e.what()).find("/nonexistent-dir/x") != std::string::npos);
    }
}

TEST_CASE("load: roundtrip is bitwise for both dtypes and self-contained files") {
    TempDir dir("reg");
    auto f = make_fixture(4, 9, 3, 11);
    for (auto dtype : {StorageDtype::f32, StorageDtype::f64}) {
        for (bool self_contained : {false, true}) {
            const auto ck = make_checkpoint(f.adapters, CheckpointMeta{"base", dtype, self_contained});
            const fs::path p = dir.path() / "rt.lxsc";
            save_checkpoint(ck, p);
            const auto back = load_checkpoint(p);
            CHECK(back == ck);
            CHECK(back.self_contained == self_contained);
        }
    }
}

TEST_CASE("load: corruption and truncation") {
    TempDir dir("reg");
    auto f = make_fixture(3, 8, 2, 5);
    const fs::path p = dir.path() / "ck.lxsc";
    save_checkpoint(f.adapters, CheckpointMeta{"base", StorageDtype::f64, false}, p);
    const auto bytes = read_file_bytes(p);
    const std::uint64_t payload_start = 16 + metadata_length(bytes);
    const std::uint64_t second_block = payload_start + 4 * 8;

    flip_byte(p, second_block + 5);
    try {
        load_checkpoint(p);
        FAIL("expected an integrity error");
    } catch (const IntegrityError& e) {
        CHECK(e.offset() == second_block);
        CHECK(std::string(e.what()).find(std::to_string(second_block)) != std::string::npos);
    }

    write_file_atomic(p, std::span(bytes.data(), bytes.size() - 40));
    CHECK_THROWS_AS(load_checkpoint(p), FormatError);
    write_file_atomic(p, std::span(bytes.data(), 10));
    CHECK_THROWS_AS(load_checkpoint(p), FormatError);

    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    CHECK_THROWS_AS(decode_checkpoint(bad_magic), FormatError);
    auto bad_version = bytes;
    bad_version[4] = 99;
    CHECK_THROWS_AS(decode_checkpoint(bad_version), FormatError);
    CHECK_THROWS_AS(load_checkpoint(dir.path() / "missing.lxsc"), IoError);
}

TEST_CASE("attach: same base reproduces the forward pass") {
    auto f = make_fixture(4, 10, 3, 13);
    for (auto dtype : {StorageDtype::f32, StorageDtype::f64}) {
        const auto ck = decode_checkpoint(encode_checkpoint(make_checkpoint(f.adapters, CheckpointMeta{"b", dtype, false})));
        const auto attached = attach_checkpoint(ck, f.base);
        REQUIRE(attached.size() == f.adapters.size());
        const double tol = dtype == StorageDtype::f32 ? 1e-6 : 1e-15;
        for (const auto& [name, a] : f.adapters) {
            const auto& b = attached.at(name);
            CHECK(b.a_frozen() == a.a_frozen());
            CHECK(b.b_frozen() == a.b_frozen());
            CHECK(rel_frobenius(merge(f.base.at(name), b), merge(f.base.at(name), a)) <= tol);
            const Matrix x = random_matrix(10, 3, 77);
            CHECK(rel_frobenius(forward_adapted(f.base.at(name), b, x), forward_adapted(f.base.at(name), a, x)) <= tol);
        }
    }
}

TEST_CASE("attach: perturbed base, missing modules, embedded projections") {
    auto f = make_fixture(3, 8, 2, 17);
    const auto ck = make_checkpoint(f.adapters, CheckpointMeta{"b", StorageDtype::f64, false});
    auto perturbed = f.base;
    perturbed.at("layer0.q")(2, 3) += 1e-3;
    CHECK_THROWS_AS(attach_checkpoint(ck, perturbed), BaseMismatchError);

    auto partial = f.base;
    partial.erase("layer0.q");
    partial.erase("layer2.q");
    try {
        attach_checkpoint(ck, partial);
        FAIL("expected a missing-module error");
    } catch (const MissingModuleError& e) {
        const std::string what = e.what();
        CHECK(what.find("layer0.q") != std::string::npos);
        CHECK(what.find("layer2.q") != std::string::npos);
    }

    // Random-init projections come from the seed alone, so only their shape
    // has to fit the base weight.
    auto shifted = f.base;
    shifted.at("layer1.q")(0, 0) += 5.0;
    CHECK(attach_checkpoint(ck, shifted).size() == 3);
    auto wrong_shape = f.base;
    wrong_shape.at("layer1.q") = Matrix(9, 8);
    CHECK_THROWS_AS(attach_checkpoint(ck, wrong_shape), BaseMismatchError);

    const auto sc = make_checkpoint(f.adapters, CheckpointMeta{"b", StorageDtype::f64, true});
    const auto attached = attach_checkpoint(sc, f.base);
    CHECK(attached.at("layer1.q").a_frozen() == f.adapters.at("layer1.q").a_frozen());
}

TEST_CASE("warm_start examples") {
    auto src = make_fixture(2, 12, 4, 19, 0.3);
    auto dst = make_fixture(2, 12, 4, 20, 0.0);
    const auto ck = make_checkpoint(src.adapters, CheckpointMeta{"b", StorageDtype::f64, false});
    const Matrix a_before = dst.adapters.at("layer0.q").a_frozen();
    warm_start(dst.adapters, ck);
    for (const auto& [name, a] : dst.adapters) CHECK(a.latent() == src.adapters.at(name).latent());
    CHECK(dst.adapters.at("layer0.q").a_frozen() == a_before);
    const auto& t = dst.adapters.at("layer0.q");
    const Matrix want = t.scaling() * matmul(matmul(t.b_frozen(), src.adapters.at("layer0.q").latent()), t.a_frozen());
    CHECK(max_abs_diff(delta_weight(t), want) == 0.0);

    auto small = make_fixture(2, 16, 8, 21);
    auto large = make_fixture(2, 16, 16, 22, 0.0);
    const auto small_ck = make_checkpoint(small.adapters, CheckpointMeta{"b", StorageDtype::f64, false});
    const Matrix untouched = large.adapters.at("layer0.q").latent();
    try {
        warm_start(large.adapters, small_ck);
        FAIL("expected a rank mismatch");
    } catch (const RankMismatchError& e) {
        const std::string what = e.what();
        CHECK(what.find("layer0.q") != std::string::npos);
        CHECK(what.find("8") != std::string::npos);
        CHECK(what.find("16") != std::string::npos);
    }
    CHECK(large.adapters.at("layer0.q").latent() == untouched);

    auto three = make_fixture(3, 12, 4, 23);
    CHECK_THROWS_AS(warm_start(three.adapters, ck), MissingModuleError);
}

TEST_CASE("warm_start reproduces the epoch-0 loss of the source model") {
    TaskSpec spec;
    spec.in_dim = spec.out_dim = 24;
    spec.n_samples = 80;
    const auto task = gen_task(spec);
    auto source = build_model(task, 4, InitKind::svd, 8.0, 1e-5, 3);
    TrainConfig c;
    c.adapter_lr = 0.05;
    c.epochs = 2;
    c.batch_size = 16;
    train(source, task.train, c);

    AdapterSet src_set{{"layer0", std::get<LoraXsAdapter>(*source.layers[0].adapter)}};
    const auto ck = make_checkpoint(src_set, CheckpointMeta{"task", StorageDtype::f64, false});

    auto target = build_model(task, 4, InitKind::svd, 8.0, 1e-5, 3);
    AdapterSet dst_set{{"layer0", std::get<LoraXsAdapter>(*target.layers[0].adapter)}};
    warm_start(dst_set, ck);
    target.layers[0].adapter = dst_set.at("layer0");
    CHECK(evaluate_loss(target, task.train) == evaluate_loss(source, task.train));
}

TEST_CASE("property: checkpoint size is independent of the hidden dimension") {
    std::optional<std::size_t> size;
    for (std::size_t n : {16, 32, 64, 100}) {
        auto f = make_fixture(3, n, 8, 31);
        const auto bytes = encode_checkpoint(make_checkpoint(f.adapters, CheckpointMeta{"b", StorageDtype::f32, false}));
        if (size) CHECK(bytes.size() == *size);
        size = bytes.size();
    }
}

TEST_CASE("property: every payload bit flip changes the id and fails the load") {
    auto f = make_fixture(2, 6, 2, 37);
    const auto ck = make_checkpoint(f.adapters, CheckpointMeta{"b", StorageDtype::f32, false});
    const auto bytes = encode_checkpoint(ck);
    const std::size_t start = 16 + metadata_length(bytes);
    for (std::size_t byte = start; byte < bytes.size() - 32; ++byte) {
        for (int bit = 0; bit < 8; ++bit) {
            auto copy = bytes;
            copy[byte] ^= static_cast<std::uint8_t>(1u << bit);
            CHECK(to_hex(sha256(std::span(copy.data() + start, bytes.size() - 32 - start))) != ck.id());
            CHECK_THROWS_AS(decode_checkpoint(copy), IntegrityError);
        }
    }
}

TEST_CASE("registry: empty listing, add, verify, gc") {
    TempDir dir("reg");
    CHECK_THROWS_AS(Registry(dir.path() / "nope"), IoError);
    auto reg = Registry::create(dir.path() / "root");
    CHECK(reg.manifest().entries.empty());
    CHECK(reg.verify().ok());

    auto f = make_fixture(2, 8, 2, 41);
    const auto ck = make_checkpoint(f.adapters, CheckpointMeta{"base-x", StorageDtype::f32, false});
    const auto e = reg.add(ck);
    CHECK(e.checkpoint_id == ck.id());
    CHECK(e.byte_size == fs::file_size(reg.root() / e.path));
    CHECK(reg.add(ck).checkpoint_id == e.checkpoint_id);
    CHECK(reg.manifest().entries.size() == 1);
    CHECK(Registry(reg.root()).manifest().entries.at(0).base_model_id == "base-x");

    {
        std::ofstream stray(reg.root() / "checkpoints" / "stray.lxsc");
        stray << "junk";
    }
    const auto dry = reg.gc(false);
    CHECK(dry.unreferenced.size() == 1);
    CHECK(fs::exists(reg.root() / "checkpoints" / "stray.lxsc"));
    const auto wet = reg.gc(true);
    CHECK(wet.applied);
    CHECK_FALSE(fs::exists(reg.root() / "checkpoints" / "stray.lxsc"));
    CHECK(fs::exists(reg.root() / e.path));
}

TEST_CASE("registry: single writer lock") {
    TempDir dir("reg");
    auto reg = Registry::create(dir.path());
    { std::ofstream(dir.path() / ".lock") << "held"; }
    auto f = make_fixture(1, 6, 2, 43);
    CHECK_THROWS_AS(reg.add(make_checkpoint(f.adapters, CheckpointMeta{})), StateError);
    fs::remove(dir.path() / ".lock");
    CHECK_NOTHROW(reg.add(make_checkpoint(f.adapters, CheckpointMeta{})));
}

TEST_CASE("registry: duplicate ids in a manifest are rejected") {
    TempDir dir("reg");
    auto reg = Registry::create(dir.path());
    auto f = make_fixture(1, 6, 2, 47);
    reg.add(make_checkpoint(f.adapters, CheckpointMeta{}));
    nlohmann::json doc;
    std::ifstream(dir.path() / "manifest.json") >> doc;
    doc["entries"].push_back(doc["entries"][0]);
    std::ofstream(dir.path() / "manifest.json") << doc.dump();
    CHECK_THROWS_AS(reg.manifest(), FormatError);
}

TEST_CASE("registry: 100 rank-16, 48-module checkpoints, one corrupted") {
    TempDir dir("reg");
    auto reg = Registry::create(dir.path());
    std::uint64_t payload_total = 0;
    std::vector<ManifestEntry> added;
    for (std::uint64_t i = 0; i < 100; ++i) {
        AdapterSet set;
        for (std::size_t m = 0; m < 48; ++m) {
            set.emplace("m" + std::to_string(m), init_loraxs_random(16, 16, 16, 16.0, 0.01, i * 1000 + m));
        }
        const auto ck = make_checkpoint(set, CheckpointMeta{"fleet", StorageDtype::f32, false});
        const auto bytes = encode_checkpoint(ck);
        payload_total += bytes.size() - 16 - metadata_length(bytes) - 32;
        added.push_back(reg.add(ck));
    }
    CHECK(payload_total == 100 * 49'152);
    CHECK(reg.manifest().entries.size() == 100);
    CHECK(reg.verify().ok());

    const auto bytes = read_file_bytes(reg.root() / added[37].path);
    flip_byte(reg.root() / added[37].path, bytes.size() - 100);
    const auto report = reg.verify();
    CHECK(report.checked == 100);
    REQUIRE(report.failures.size() == 1);
    CHECK(report.failures[0].checkpoint_id == added[37].checkpoint_id);
}
