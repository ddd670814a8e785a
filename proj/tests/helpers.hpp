#ifndef RED_TEST_HELPERS_HPP
#define RED_TEST_HELPERS_HPP

#include "red/dataio.hpp"
#include "red/model.hpp"

#include <filesystem>
#include <random>
#include <string>

namespace red::testing {

inline Architecture tiny_arch(int side, int classes)
{
    Architecture a;
    a.side = side;
    a.classes = classes;
    a.conv_channels = {3, 4};
    a.hidden = 6;
    return a;
}

inline Architecture small_arch(int side, int classes)
{
    Architecture a;
    a.side = side;
    a.classes = classes;
    a.conv_channels = {8, 16};
    a.hidden = 32;
    return a;
}

inline Image random_image(int h, int w, std::uint64_t seed)
{
    Rng rng(seed);
    Image img(h, w);
    for (auto& v : img.data) {
        v = uniform(rng, 0.0, 1.0);
    }
    return img;
}

/// Relative error ||a - n||_inf / max(||n||_inf, floor).
inline double rel_err(const std::vector<double>& a, const std::vector<double>& n, double floor = 1e-8)
{
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        num = std::max(num, std::abs(a[i] - n[i]));
        den = std::max(den, std::abs(n[i]));
    }
    return num / std::max(den, floor);
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name)
{
    auto p = std::filesystem::temp_directory_path() / ("red_test_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

} // namespace red::testing

#endif
