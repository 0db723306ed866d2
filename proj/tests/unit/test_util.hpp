// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ww/rng.hpp"

namespace wwtest {

namespace fs = std::filesystem;

// Fresh per-test scratch directory under the system temp dir.
inline fs::path scratch_dir(const std::string& name) {
    fs::path p = fs::temp_directory_path() / ("ww_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

inline std::vector<uint8_t> slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void spit(const fs::path& p, const std::vector<uint8_t>& bytes) {
    std::ofstream out(p, std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

// Test-side generator: independent of the library's streams.
struct TestRng {
    ww::CounterRng rng;
    explicit TestRng(uint64_t seed) : rng(seed, ww::RngStream::sampling, 0xfeedULL) {}
    double normal() { return rng.normal(); }
    double uniform() { return rng.uniform(); }
    uint64_t below(uint64_t n) { return rng.below(n); }
};

inline Eigen::MatrixXd gaussian(TestRng& r, Eigen::Index m, Eigen::Index n) {
    Eigen::MatrixXd g(m, n);
    for (Eigen::Index i = 0; i < m; ++i)
        for (Eigen::Index j = 0; j < n; ++j) g(i, j) = r.normal();
    return g;
}

inline Eigen::MatrixXd random_orthonormal(TestRng& r, Eigen::Index m, Eigen::Index n) {
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(gaussian(r, m, n));
    return qr.householderQ() * Eigen::MatrixXd::Identity(m, n);
}

// M = U diag(s) V^T with random orthonormal factors.
inline Eigen::MatrixXd with_spectrum(TestRng& r, Eigen::Index m, Eigen::Index n, const Eigen::VectorXd& s) {
    const Eigen::Index p = s.size();
    return random_orthonormal(r, m, p) * s.asDiagonal() * random_orthonormal(r, n, p).transpose();
}

// Cosines of principal angles via Eigen's own SVD (independent of the library oracle).
inline double max_angle_eigen(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B) {
    const Eigen::MatrixXd R = B - A * (A.transpose() * B);
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(R);
    const double s = svd.singularValues().size() ? svd.singularValues()(0) : 0.0;
    return std::asin(std::min(1.0, s));
}

inline Eigen::VectorXd unit(Eigen::VectorXd v) {
    return v / v.norm();
}

} // namespace wwtest
