#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "sammp/rng.hpp"
#include "sammp/tensor.hpp"

namespace testutil {

// Central finite difference of a scalar-valued rebuild function with respect
// to one entry of a leaf tensor. The graph is rebuilt per probe, so the
// derivative is independent of any recorded tape.
inline double fd_grad(const std::function<double()>& eval, std::vector<double>& storage,
                      std::size_t idx, double h = 1e-5) {
    double saved = storage[idx];
    storage[idx] = saved + h;
    double up = eval();
    storage[idx] = saved - h;
    double down = eval();
    storage[idx] = saved;
    return (up - down) / (2.0 * h);
}

inline bool grad_close(double analytic, double numeric, double rtol, double atol = 1e-7) {
    return std::abs(analytic - numeric) <=
           atol + rtol * std::max(std::abs(analytic), std::abs(numeric));
}

// Checks d(eval)/d(leaf[i]) for every i against the analytic grads vector.
// eval must rebuild the graph from current leaf values and return the loss.
inline bool check_grads(const std::function<double()>& eval, sammp::Tensor leaf,
                        const std::vector<double>& analytic, double rtol, double h = 1e-5,
                        std::string* msg = nullptr) {
    std::vector<double>& storage = leaf.mutable_data();
    for (std::size_t i = 0; i < storage.size(); ++i) {
        double num = fd_grad(eval, storage, i, h);
        if (!grad_close(analytic[i], num, rtol)) {
            if (msg) {
                char buf[160];
                std::snprintf(buf, sizeof(buf), "entry %zu: analytic %.10g vs fd %.10g", i,
                              analytic[i], num);
                *msg = buf;
            }
            return false;
        }
    }
    return true;
}

inline sammp::Tensor random_tensor(sammp::Shape shape, sammp::Rng& rng, double lo = -2.0,
                                   double hi = 2.0) {
    std::vector<double> data(sammp::shape_numel(shape));
    for (double& v : data) v = rng.uniform(lo, hi);
    return sammp::Tensor::from_data(std::move(shape), std::move(data));
}

// Unique scratch directory under the build tree; removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static int counter = 0;
        path_ = std::filesystem::temp_directory_path() /
                ("sammp_test_" + tag + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    const std::filesystem::path& path() const { return path_; }
    std::string str() const { return path_.string(); }
    std::string file(const std::string& name) const { return (path_ / name).string(); }

private:
    std::filesystem::path path_;
};

}  // namespace testutil
