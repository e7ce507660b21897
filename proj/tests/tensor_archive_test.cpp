// Copyright (c) 2026, The linmerge Authors
// SPDX-License-Identifier: Apache-2.0
//

#include <cstring>
#include <limits>

#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace linmerge;
using linmerge::testing::with_config;

namespace {

TensorArchive one_tensor(std::vector<float> data, std::vector<std::size_t> shape) {
    TensorArchive a;
    a.insert({"w", std::move(shape), std::move(data)});
    return with_config(a);
}

std::vector<std::uint8_t> raw_file(const std::string & header, std::size_t payload_bytes) {
    std::vector<std::uint8_t> out(8 + header.size() + payload_bytes, 0);
    const std::uint64_t n = header.size();
    std::memcpy(out.data(), &n, 8);
    std::memcpy(out.data() + 8, header.data(), header.size());
    return out;
}

} // namespace

TEST(TensorArchive, ReadsSmallestWellFormedFile) {
    const std::string header =
        R"({"meta":{"model_config":"{}"},"tensors":{"w":{"dtype":"f32","offsets":[0,16],"shape":[2,2]}}})";
    auto bytes = raw_file(header, 16);
    const float vals[4] = {1.f, 2.f, 3.f, 4.f};
    std::memcpy(bytes.data() + 8 + header.size(), vals, 16);
    const auto a = deserialize_archive(bytes);
    ASSERT_EQ(a.tensors.size(), 1u);
    EXPECT_EQ(a.at("w").shape, (std::vector<std::size_t>{2, 2}));
    EXPECT_EQ(a.at("w").data, (std::vector<float>{1, 2, 3, 4}));
    // canonical writer reproduces the same bytes
    EXPECT_EQ(serialize_archive(a), bytes);
}

TEST(TensorArchive, OffsetBeyondPayloadIsTruncation) {
    const std::string header =
        R"({"meta":{"model_config":"{}"},"tensors":{"w":{"dtype":"f32","offsets":[0,16],"shape":[2,2]}}})";
    EXPECT_THROW(deserialize_archive(raw_file(header, 8)), TruncationError);
    EXPECT_THROW(deserialize_archive(std::vector<std::uint8_t>{1, 2, 3}), TruncationError);
}

TEST(TensorArchive, MalformedHeadersAreFormatErrors) {
    EXPECT_THROW(deserialize_archive(raw_file("{not json", 0)), FormatError);
    EXPECT_THROW(deserialize_archive(raw_file(R"({"tensors":{}})", 0)), FormatError);
    EXPECT_THROW(deserialize_archive(raw_file(R"({"meta":{},"tensors":{}})", 0)), FormatError);
    // wrong dtype
    EXPECT_THROW(deserialize_archive(raw_file(
                     R"({"meta":{"model_config":"{}"},"tensors":{"w":{"dtype":"f16","offsets":[0,8],"shape":[2,2]}}})",
                     8)),
                 FormatError);
    // gap between tensors
    EXPECT_THROW(deserialize_archive(raw_file(
                     R"({"meta":{"model_config":"{}"},"tensors":{"a":{"dtype":"f32","offsets":[0,4],"shape":[1]},)"
                     R"("b":{"dtype":"f32","offsets":[8,12],"shape":[1]}}})",
                     12)),
                 FormatError);
    // trailing payload
    EXPECT_THROW(deserialize_archive(raw_file(R"({"meta":{"model_config":"{}"},"tensors":{}})", 4)), FormatError);
}

TEST(TensorArchive, NonFiniteRejectedOnReadAndWrite) {
    const auto nan = std::numeric_limits<float>::quiet_NaN();
    const auto bad = one_tensor({1.f, nan}, {2});
    EXPECT_THROW(serialize_archive(bad), DataError);

    const std::string header =
        R"({"meta":{"model_config":"{}"},"tensors":{"w":{"dtype":"f32","offsets":[0,4],"shape":[1]}}})";
    auto bytes = raw_file(header, 4);
    const float inf = std::numeric_limits<float>::infinity();
    std::memcpy(bytes.data() + 8 + header.size(), &inf, 4);
    EXPECT_THROW(deserialize_archive(bytes), DataError);
}

TEST(TensorArchive, WriteRejectsNanBeforeTouchingFile) {
    const auto dir = linmerge::testing::temp_dir("nan_write");
    const auto path = dir / "x.lmt";
    const auto bad = one_tensor({std::numeric_limits<float>::quiet_NaN()}, {1});
    EXPECT_THROW(write_archive(bad, path), DataError);
    EXPECT_FALSE(std::filesystem::exists(path));
}

TEST(TensorArchive, EmptyArchiveIsValid) {
    const auto a = with_config(TensorArchive{});
    const auto bytes = serialize_archive(a);
    const std::string header(bytes.begin() + 8, bytes.end());
    EXPECT_EQ(header.rfind(R"({"meta":{"model_config":)", 0), 0u);
    EXPECT_NE(header.find(R"("tensors":{})"), std::string::npos);
    EXPECT_EQ(deserialize_archive(bytes), a);
}

TEST(TensorArchive, FileRoundTripIsByteIdentical) {
    const auto fx = make_fixture(linmerge::testing::tiny_spec());
    const auto dir = linmerge::testing::temp_dir("roundtrip");
    write_archive(fx.base, dir / "a.lmt");
    const auto back = read_archive(dir / "a.lmt");
    EXPECT_EQ(back, fx.base);
    write_archive(back, dir / "b.lmt");
    EXPECT_EQ(file_digest(dir / "a.lmt"), file_digest(dir / "b.lmt"));
    EXPECT_EQ(serialize_archive(back), serialize_archive(fx.base));
}

TEST(TensorArchive, MissingFileIsIoError) { EXPECT_THROW(read_archive("/nonexistent/x.lmt"), IoError); }

TEST(TaskVector, ElementwiseDifference) {
    const auto ft = one_tensor({1.f, 2.f}, {2});
    const auto base = one_tensor({0.5f, 2.f}, {2});
    const auto tau = task_vector(ft, base);
    EXPECT_EQ(tau.at("w").data, (std::vector<float>{0.5f, 0.f}));
    EXPECT_EQ(tau.meta.at("kind"), "task_vector");
    const auto zero = task_vector(base, base);
    EXPECT_EQ(zero.at("w").data, (std::vector<float>{0.f, 0.f}));
}

TEST(TaskVector, MissingNameIsCompatError) {
    auto base = one_tensor({1.f}, {1});
    auto ft = base;
    ft.insert({"extra", {1}, {0.f}});
    EXPECT_THROW(task_vector(ft, base), CompatError);
    auto reshaped = one_tensor({1.f, 2.f}, {1, 2});
    EXPECT_THROW(task_vector(reshaped, one_tensor({1.f, 2.f}, {2, 1})), CompatError);
}

TEST(LinearCombine, Arithmetic) {
    const auto base = one_tensor({1.f}, {1});
    const std::vector<TensorArchive> vecs{one_tensor({2.f}, {1}), one_tensor({4.f}, {1})};
    const auto out = linear_combine(base, vecs, {{"w", {0.5, 0.25}}});
    EXPECT_EQ(out.at("w").data[0], 3.f);
}

TEST(LinearCombine, ZeroAndUnitCoefficients) {
    const auto fx = make_fixture(linmerge::testing::tiny_spec(1));
    const std::vector<TensorArchive> taus{task_vector(fx.fine_tuned[0], fx.base)};
    EXPECT_EQ(linear_combine(fx.base, taus, uniform_coeffs(fx.base, {0.0})).tensors, fx.base.tensors);
    EXPECT_LE(linmerge::testing::max_abs_diff(linear_combine(fx.base, taus, uniform_coeffs(fx.base, {1.0})),
                                              fx.fine_tuned[0]),
              1e-7);
}

TEST(LinearCombine, CoefficientErrors) {
    const auto base = one_tensor({1.f}, {1});
    const std::vector<TensorArchive> vecs{one_tensor({2.f}, {1})};
    EXPECT_THROW(linear_combine(base, vecs, {}), CoeffError);
    EXPECT_THROW(linear_combine(base, vecs, {{"w", {0.5, 0.5}}}), CoeffError);
}

TEST(LinearCombine, UniformMeanMatchesElementwiseMean) {
    const auto fx = make_fixture(linmerge::testing::tiny_spec(3));
    std::vector<TensorArchive> taus;
    for (const auto & ft : fx.fine_tuned) taus.push_back(task_vector(ft, fx.base));
    const auto out = linear_combine(fx.base, taus, uniform_coeffs(fx.base, std::vector<double>(3, 1.0 / 3.0)));
    for (const auto & [name, t] : out.tensors) {
        for (std::size_t i = 0; i < t.data.size(); ++i) {
            double mean = 0.0;
            for (const auto & ft : fx.fine_tuned) mean += ft.at(name).data[i];
            mean /= 3.0;
            ASSERT_NEAR(t.data[i], mean, 1e-7) << name << "[" << i << "]";
        }
    }
}

TEST(LinearCombine, IsLinearInCoefficients) {
    const auto fx = make_fixture(linmerge::testing::tiny_spec(2, 0.5, 7));
    std::vector<TensorArchive> taus;
    for (const auto & ft : fx.fine_tuned) taus.push_back(task_vector(ft, fx.base));
    Rng rng(3);
    for (int trial = 0; trial < 10; ++trial) {
        const std::vector<double> c1{rng.uniform() * 2 - 1, rng.uniform() * 2 - 1};
        const std::vector<double> c2{rng.uniform() * 2 - 1, rng.uniform() * 2 - 1};
        const std::vector<double> c12{c1[0] + c2[0], c1[1] + c2[1]};
        const auto a = linear_combine(fx.base, taus, uniform_coeffs(fx.base, c1));
        const auto b = linear_combine(fx.base, taus, uniform_coeffs(fx.base, c2));
        const auto ab = linear_combine(fx.base, taus, uniform_coeffs(fx.base, c12));
        for (const auto & [name, t] : ab.tensors) {
            for (std::size_t i = 0; i < t.data.size(); ++i) {
                // (base + c1.tau) + (base + c2.tau) - base == base + (c1 + c2).tau
                const double lhs = double(a.at(name).data[i]) + b.at(name).data[i] - fx.base.at(name).data[i];
                ASSERT_NEAR(lhs, t.data[i], 1e-6);
            }
        }
    }
}
