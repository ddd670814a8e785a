#ifndef RED_DATAIO_HPP
#define RED_DATAIO_HPP

// Synthetic sign templates and datasets, dataset directories (index.csv + PNG),
// and persistence of patterns, color models and classifier checkpoints.

#include "red/compositing.hpp"
#include "red/core.hpp"
#include "red/dataset.hpp"
#include "red/model.hpp"
#include "red/sign_template.hpp"

#include <png.h>
#include <nlohmann/json.hpp>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <sstream>
#include <string>
#include <vector>

namespace red {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------------------------
// Synthetic templates
// ---------------------------------------------------------------------------------------------

namespace detail {

// 3x5 bitmap digits, rows top to bottom, bit 2 = left column.
inline const std::array<std::array<std::uint8_t, 5>, 10>& digit_font()
{
    static const std::array<std::array<std::uint8_t, 5>, 10> font{{
        {7, 5, 5, 5, 7}, {2, 6, 2, 2, 7}, {7, 1, 7, 4, 7}, {7, 1, 7, 1, 7}, {5, 5, 7, 1, 1},
        {7, 4, 7, 1, 7}, {7, 4, 7, 5, 7}, {7, 1, 2, 2, 2}, {7, 5, 7, 5, 7}, {7, 5, 7, 1, 7},
    }};
    return font;
}

inline bool inside_silhouette(Silhouette s, double dx, double dy, double r)
{
    switch (s) {
    case Silhouette::circle: return dx * dx + dy * dy <= r * r;
    case Silhouette::octagon: return std::abs(dx) <= r && std::abs(dy) <= r && std::abs(dx) + std::abs(dy) <= std::sqrt(2.0) * r;
    case Silhouette::diamond: return std::abs(dx) + std::abs(dy) <= r;
    case Silhouette::triangle: {
        const double top = -r, bottom = 0.8 * r;
        if (dy < top || dy > bottom) {
            return false;
        }
        return std::abs(dx) <= (dy - top) / (bottom - top) * r;
    }
    }
    return false;
}

struct Palette {
    Rgb background, border, glyph;
};

inline constexpr Rgb sign_red{0.8, 0.1, 0.1};
inline constexpr Rgb sign_white{0.95, 0.95, 0.95};
inline constexpr Rgb sign_yellow{0.95, 0.8, 0.1};
inline constexpr Rgb sign_black{0.05, 0.05, 0.05};

inline Palette palette_for(Silhouette s)
{
    switch (s) {
    case Silhouette::octagon: return {sign_red, sign_white, sign_white};
    case Silhouette::diamond: return {sign_yellow, sign_black, sign_black};
    default: return {sign_white, sign_red, sign_black};
    }
}

} // namespace detail

/// Template for class k: silhouette family cycles every two classes, glyph is a two-digit number.
inline SignTemplate make_template(int k, int side, Silhouette silhouette, int number)
{
    if (side < 12) {
        throw ValidationError("side " + std::to_string(side) + " too small to rasterize glyphs (need >= 12)");
    }
    if (number < 0 || number > 99) {
        throw ValidationError("glyph number must have at most two digits");
    }
    SignTemplate t;
    t.class_id = k;
    t.side = side;
    t.silhouette = silhouette;
    t.glyph = std::to_string(number);
    t.foreground = Mask(side, side);
    t.background = Mask(side, side);
    t.foreground_color = Image(side, side, 0.0);
    const auto pal = detail::palette_for(silhouette);
    t.native_background = pal.background;

    const double c = (side - 1) / 2.0;
    const double r = 0.47 * side;
    Mask shape(side, side);
    for (int y = 0; y < side; ++y) {
        for (int x = 0; x < side; ++x) {
            if (detail::inside_silhouette(silhouette, x - c, y - c, r)) {
                shape.set(y, x);
            }
        }
    }
    const int border = std::max(1, side / 15);
    for (int y = 0; y < side; ++y) {
        for (int x = 0; x < side; ++x) {
            if (!shape.at(y, x)) {
                continue;
            }
            bool edge = false;
            for (int dy = -border; dy <= border && !edge; ++dy) {
                for (int dx = -border; dx <= border && !edge; ++dx) {
                    const int yy = y + dy, xx = x + dx;
                    edge = yy < 0 || xx < 0 || yy >= side || xx >= side || !shape.at(yy, xx);
                }
            }
            if (edge) {
                t.foreground.set(y, x);
                t.foreground_color.set_pixel(y, x, pal.border);
            } else {
                t.background.set(y, x);
            }
        }
    }

    const int scale = std::max(1, side / 15);
    const int digits = static_cast<int>(t.glyph.size());
    const int gw = digits * 3 * scale + (digits - 1) * scale;
    const int gh = 5 * scale;
    const int shift = silhouette == Silhouette::triangle ? static_cast<int>(0.2 * r) : 0;
    const int top = static_cast<int>(std::lround(c - gh / 2.0)) + shift;
    int left = static_cast<int>(std::lround(c - gw / 2.0 + 0.5));
    for (char ch : t.glyph) {
        const auto& rows = detail::digit_font()[ch - '0'];
        for (int gy = 0; gy < 5; ++gy) {
            for (int gx = 0; gx < 3; ++gx) {
                if (!((rows[gy] >> (2 - gx)) & 1)) {
                    continue;
                }
                for (int sy = 0; sy < scale; ++sy) {
                    for (int sx = 0; sx < scale; ++sx) {
                        const int y = top + gy * scale + sy, x = left + gx * scale + sx;
                        if (y >= 0 && x >= 0 && y < side && x < side && shape.at(y, x)) {
                            t.background.bits[static_cast<std::size_t>(y) * side + x] = 0;
                            t.foreground.set(y, x);
                            t.foreground_color.set_pixel(y, x, pal.glyph);
                        }
                    }
                }
            }
        }
        left += 4 * scale;
    }
    t.validate();
    return t;
}

// Consecutive classes alternate shape; within each block of four, classes k and k+2 share one,
// so telling them apart needs the glyph (or the background).
inline Silhouette silhouette_for_class(int k)
{
    static constexpr Silhouette order[] = {Silhouette::circle, Silhouette::octagon, Silhouette::diamond,
                                           Silhouette::triangle};
    return order[(2 * (k / 4) + k % 2) % 4];
}

inline std::vector<SignTemplate> synth_templates(int classes, int side)
{
    if (classes < 2 || classes > 90) {
        throw ValidationError("synthetic class count must be in [2, 90]");
    }
    std::vector<SignTemplate> out;
    for (int k = 0; k < classes; ++k) {
        out.push_back(make_template(k, side, silhouette_for_class(k), 10 + (k * 7) % 90));
    }
    return out;
}

/// Lighting roster used by every synthetic dataset, fitted once per process.
inline const std::vector<ColorModel>& default_conditions()
{
    static std::once_flag once;
    static std::vector<ColorModel> models;
    std::call_once(once, [] { models = synth_conditions(0); });
    return models;
}

/// Renders `templates` through random captures; `n_per_class` shots per class.
inline Dataset render_dataset(std::vector<SignTemplate> templates, int n_per_class, std::uint64_t seed,
                              const CaptureJitter& jitter = {})
{
    if (templates.size() < 2) {
        throw ValidationError("need at least 2 classes");
    }
    if (n_per_class < 1) {
        throw ValidationError("need at least one example per class");
    }
    Dataset ds;
    ds.classes = static_cast<int>(templates.size());
    ds.side = templates.front().side;
    ds.conditions = default_conditions();
    ds.templates = std::move(templates);
    const PatternSet native = native_patterns(ds.templates);
    Rng rng(mix_seed(seed, 77));
    for (int k = 0; k < ds.classes; ++k) {
        for (int i = 0; i < n_per_class; ++i) {
            LabeledExample ex;
            ex.label = k;
            ex.capture = random_capture(rng, ds.side, static_cast<int>(ds.conditions.size()), jitter);
            ex.image = capture_image(native.at(k), ds.templates[k], *ex.capture, ds.conditions);
            ds.examples.push_back(std::move(ex));
        }
    }
    ds.validate();
    return ds;
}

inline Dataset synth_dataset(int classes, int n_per_class, int side, std::uint64_t seed)
{
    if (classes < 2) {
        throw ValidationError("synthetic dataset needs K >= 2");
    }
    return render_dataset(synth_templates(classes, side), n_per_class, seed);
}

// ---------------------------------------------------------------------------------------------
// PNG and dataset directories
// ---------------------------------------------------------------------------------------------

/// Bilinear resize with half-pixel centres.
inline Image resize_bilinear(const Image& src, int height, int width)
{
    if (src.height == height && src.width == width) {
        return src;
    }
    Image out(height, width, 0.0);
    const double sy = static_cast<double>(src.height) / height;
    const double sx = static_cast<double>(src.width) / width;
    for (int y = 0; y < height; ++y) {
        const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, src.height - 1.0);
        const int y0 = static_cast<int>(fy);
        const int y1 = std::min(y0 + 1, src.height - 1);
        const double wy = fy - y0;
        for (int x = 0; x < width; ++x) {
            const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, src.width - 1.0);
            const int x0 = static_cast<int>(fx);
            const int x1 = std::min(x0 + 1, src.width - 1);
            const double wx = fx - x0;
            for (int c = 0; c < 3; ++c) {
                const double v = (1 - wy) * ((1 - wx) * src.at(c, y0, x0) + wx * src.at(c, y0, x1))
                               + wy * ((1 - wx) * src.at(c, y1, x0) + wx * src.at(c, y1, x1));
                out.at(c, y, x) = std::clamp(v, 0.0, 1.0);
            }
        }
    }
    return out;
}

inline Image read_png(const fs::path& path)
{
    png_image img;
    std::memset(&img, 0, sizeof img);
    img.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&img, path.string().c_str())) {
        throw LoadError("cannot decode image '" + path.string() + "': " + img.message);
    }
    img.format = PNG_FORMAT_RGB;
    std::vector<png_byte> buf(PNG_IMAGE_SIZE(img));
    if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
        const std::string msg = img.message;
        png_image_free(&img);
        throw LoadError("cannot decode image '" + path.string() + "': " + msg);
    }
    Image out(static_cast<int>(img.height), static_cast<int>(img.width), 0.0);
    for (int y = 0; y < out.height; ++y) {
        for (int x = 0; x < out.width; ++x) {
            for (int c = 0; c < 3; ++c) {
                out.at(c, y, x) = buf[(static_cast<std::size_t>(y) * out.width + x) * 3 + c] / 255.0;
            }
        }
    }
    return out;
}

inline void write_png_rgb8(const fs::path& path, int height, int width, const std::vector<png_byte>& rgb)
{
    png_image img;
    std::memset(&img, 0, sizeof img);
    img.version = PNG_IMAGE_VERSION;
    img.width = static_cast<png_uint_32>(width);
    img.height = static_cast<png_uint_32>(height);
    img.format = PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&img, path.string().c_str(), 0, rgb.data(), 0, nullptr)) {
        throw Error("cannot write '" + path.string() + "': " + img.message);
    }
}

inline std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

inline void write_png(const fs::path& path, const Image& img)
{
    std::vector<png_byte> buf(img.plane() * 3);
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
            for (int c = 0; c < 3; ++c) {
                buf[(static_cast<std::size_t>(y) * img.width + x) * 3 + c] = to_byte(img.at(c, y, x));
            }
        }
    }
    write_png_rgb8(path, img.height, img.width, buf);
}

struct LoadOptions {
    int side = 30;
    int classes = 0; // 0: one more than the largest label
};

inline Dataset load_dataset(const fs::path& root, const LoadOptions& opts = {})
{
    const fs::path index = root / "index.csv";
    if (!fs::exists(index)) {
        throw LoadError("no index file (expected " + index.string() + ")");
    }
    std::ifstream in(index);
    if (!in) {
        throw LoadError("cannot open " + index.string());
    }
    Dataset ds;
    ds.side = opts.side;
    std::string line;
    int lineno = 0;
    int max_label = -1;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (line.empty() || (lineno == 1 && line.rfind("filename", 0) == 0)) {
            continue;
        }
        const auto comma = line.rfind(',');
        if (comma == std::string::npos) {
            throw LoadError(index.string() + ":" + std::to_string(lineno) + ": expected 'filename,label'");
        }
        const std::string file = line.substr(0, comma);
        int label = 0;
        try {
            std::size_t used = 0;
            label = std::stoi(line.substr(comma + 1), &used);
            if (used != line.size() - comma - 1) {
                throw std::invalid_argument("trailing");
            }
        } catch (const std::exception&) {
            throw LoadError(index.string() + ":" + std::to_string(lineno) + ": bad label for '" + file + "'");
        }
        if (label < 0 || (opts.classes > 0 && label >= opts.classes)) {
            throw LoadError("label " + std::to_string(label) + " out of range for '" + file + "'");
        }
        LabeledExample ex;
        ex.label = label;
        ex.image = resize_bilinear(read_png(root / file), opts.side, opts.side);
        max_label = std::max(max_label, label);
        ds.examples.push_back(std::move(ex));
    }
    ds.classes = opts.classes > 0 ? opts.classes : max_label + 1;
    try {
        ds.validate();
    } catch (const ValidationError& e) {
        throw LoadError(root.string() + ": " + e.what());
    }
    return ds;
}

/// Writes images as 8-bit PNG plus index.csv (templates and captures are not persisted).
inline void save_dataset(const Dataset& ds, const fs::path& root)
{
    fs::create_directories(root);
    std::ofstream idx(root / "index.csv");
    idx << "filename,label\n";
    for (std::size_t i = 0; i < ds.examples.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "img_%05zu.png", i);
        write_png(root / name, ds.examples[i].image);
        idx << name << ',' << ds.examples[i].label << '\n';
    }
    if (!idx) {
        throw Error("cannot write " + (root / "index.csv").string());
    }
}

// ---------------------------------------------------------------------------------------------
// Artifacts
// ---------------------------------------------------------------------------------------------

using json = nlohmann::ordered_json;

inline constexpr int pattern_format_version = 1;
inline constexpr int color_format_version = 1;
inline constexpr std::uint32_t checkpoint_version = 1;

inline std::string read_text(const fs::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw LoadError("cannot open " + path.string());
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_text(const fs::path& path, const std::string& text)
{
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    std::ofstream out(path, std::ios::binary);
    out << text;
    if (!out) {
        throw Error("cannot write " + path.string());
    }
}

namespace detail {

inline json parse_json(const std::string& text, const std::string& what)
{
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        throw ParseError(what + ": " + e.what());
    }
}

template <typename T>
T field(const json& j, const char* key, const std::string& ctx)
{
    if (!j.is_object() || !j.contains(key)) {
        throw ParseError(ctx + ": missing field '" + key + "'");
    }
    try {
        return j.at(key).get<T>();
    } catch (const json::exception&) {
        throw ParseError(ctx + ": field '" + key + "' has the wrong type");
    }
}

inline void check_header(const json& j, const char* format, int version, const std::string& ctx)
{
    if (field<std::string>(j, "format", ctx) != format) {
        throw ParseError(ctx + ": not a " + format + " file");
    }
    const int v = field<int>(j, "version", ctx);
    if (v != version) {
        throw ParseError(ctx + ": unsupported version " + std::to_string(v) + " (expected "
                         + std::to_string(version) + ")");
    }
}

} // namespace detail

inline std::string pattern_set_json(const PatternSet& set)
{
    set.validate();
    json j;
    j["format"] = "red-patterns";
    j["version"] = pattern_format_version;
    j["grid_size"] = set.grid_size;
    json classes = json::array();
    for (int k = 0; k < set.classes(); ++k) {
        const auto& g = set.grids[k];
        json params = json::array(), colors = json::array();
        for (int r = 0; r < g.grid_size; ++r) {
            for (int c = 0; c < g.grid_size; ++c) {
                params.push_back({g.param(r, c, 0), g.param(r, c, 1), g.param(r, c, 2)});
                const auto rgb = g.color(r, c);
                colors.push_back({rgb[0], rgb[1], rgb[2]});
            }
        }
        classes.push_back({{"class", k}, {"grid_size", g.grid_size}, {"params", params}, {"colors", colors}});
    }
    j["classes"] = classes;
    return j.dump(1) + "\n";
}

/// Cell colors are informational; the parameters are authoritative on load.
inline PatternSet parse_pattern_set(const std::string& text, const std::string& ctx = "pattern file")
{
    const json j = detail::parse_json(text, ctx);
    detail::check_header(j, "red-patterns", pattern_format_version, ctx);
    PatternSet set;
    set.grid_size = detail::field<int>(j, "grid_size", ctx);
    if (!PatternGrid::supported(set.grid_size)) {
        throw ValidationError(ctx + ": unsupported grid size " + std::to_string(set.grid_size));
    }
    const json classes = detail::field<json>(j, "classes", ctx);
    if (!classes.is_array()) {
        throw ParseError(ctx + ": 'classes' must be an array");
    }
    for (std::size_t k = 0; k < classes.size(); ++k) {
        const std::string cctx = ctx + ": classes[" + std::to_string(k) + "]";
        const auto& e = classes[k];
        if (detail::field<int>(e, "class", cctx) != static_cast<int>(k)) {
            throw ParseError(cctx + ": classes must be listed in order 0..K-1");
        }
        const int g = detail::field<int>(e, "grid_size", cctx);
        if (g != set.grid_size) {
            throw ValidationError(cctx + ": grid size " + std::to_string(g) + " differs from the set's");
        }
        const auto rows = detail::field<std::vector<std::vector<double>>>(e, "params", cctx);
        if (rows.size() != static_cast<std::size_t>(g) * g) {
            throw ParseError(cctx + ": expected " + std::to_string(g * g) + " cells, found " + std::to_string(rows.size()));
        }
        PatternGrid grid(g);
        for (std::size_t i = 0; i < rows.size(); ++i) {
            if (rows[i].size() != 3) {
                throw ParseError(cctx + ": params[" + std::to_string(i) + "] is not an RGB triple");
            }
            for (int c = 0; c < 3; ++c) {
                grid.params[i * 3 + c] = rows[i][c];
            }
        }
        set.grids.push_back(std::move(grid));
    }
    return set;
}

inline void save_pattern_set(const PatternSet& set, const fs::path& path) { write_text(path, pattern_set_json(set)); }

inline PatternSet load_pattern_set(const fs::path& path) { return parse_pattern_set(read_text(path), path.string()); }

inline std::string color_model_json(const ColorModel& m)
{
    json j;
    j["format"] = "red-color-model";
    j["version"] = color_format_version;
    j["condition"] = m.condition;
    j["fit_mse"] = std::isfinite(m.fit_mse) ? json(m.fit_mse) : json(nullptr);
    json layers = json::array();
    for (const auto& l : m.layers) {
        layers.push_back({{"inputs", l.inputs}, {"outputs", l.outputs}, {"weight", l.weight}, {"bias", l.bias}});
    }
    j["layers"] = layers;
    return j.dump(1) + "\n";
}

inline ColorModel parse_color_model(const std::string& text, const std::string& ctx = "color model")
{
    const json j = detail::parse_json(text, ctx);
    detail::check_header(j, "red-color-model", color_format_version, ctx);
    ColorModel m;
    m.condition = detail::field<std::string>(j, "condition", ctx);
    if (j.contains("fit_mse") && j["fit_mse"].is_number()) {
        m.fit_mse = j["fit_mse"].get<double>();
    }
    const json layers = detail::field<json>(j, "layers", ctx);
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const std::string lctx = ctx + ": layers[" + std::to_string(i) + "]";
        DenseLayer l;
        l.inputs = detail::field<int>(layers[i], "inputs", lctx);
        l.outputs = detail::field<int>(layers[i], "outputs", lctx);
        l.weight = detail::field<std::vector<double>>(layers[i], "weight", lctx);
        l.bias = detail::field<std::vector<double>>(layers[i], "bias", lctx);
        m.layers.push_back(std::move(l));
    }
    m.validate();
    return m;
}

inline void save_color_model(const ColorModel& m, const fs::path& path) { write_text(path, color_model_json(m)); }

inline ColorModel load_color_model(const fs::path& path) { return parse_color_model(read_text(path), path.string()); }

inline json architecture_json(const Architecture& a)
{
    return {{"side", a.side}, {"classes", a.classes}, {"conv_channels", a.conv_channels}, {"hidden", a.hidden}};
}

inline Architecture architecture_from_json(const json& j, const std::string& ctx)
{
    Architecture a;
    a.side = detail::field<int>(j, "side", ctx);
    a.classes = detail::field<int>(j, "classes", ctx);
    a.conv_channels = detail::field<std::vector<int>>(j, "conv_channels", ctx);
    a.hidden = detail::field<int>(j, "hidden", ctx);
    return a;
}

// Layout: "REDCKPT\0", u32 version, u32 n, n bytes of JSON (architecture + extra config echo),
// u64 count, count little-endian f64 parameters.
inline void save_checkpoint(const Classifier& f, const fs::path& path, const json& config_echo = json::object())
{
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    std::ofstream out(path, std::ios::binary);
    const json header{{"architecture", architecture_json(f.arch())}, {"config", config_echo}};
    const std::string text = header.dump();
    out.write("REDCKPT", 8);
    const std::uint32_t version = checkpoint_version;
    const auto n = static_cast<std::uint32_t>(text.size());
    out.write(reinterpret_cast<const char*>(&version), sizeof version);
    out.write(reinterpret_cast<const char*>(&n), sizeof n);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    const std::uint64_t count = f.param_count();
    out.write(reinterpret_cast<const char*>(&count), sizeof count);
    out.write(reinterpret_cast<const char*>(f.params().data()), static_cast<std::streamsize>(count * sizeof(double)));
    if (!out) {
        throw Error("cannot write checkpoint " + path.string());
    }
}

inline Classifier load_checkpoint(const fs::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw LoadError("cannot open checkpoint " + path.string());
    }
    char magic[8] = {};
    in.read(magic, 8);
    if (!in || std::memcmp(magic, "REDCKPT", 8) != 0) {
        throw LoadError(path.string() + ": not a checkpoint");
    }
    std::uint32_t version = 0, n = 0;
    in.read(reinterpret_cast<char*>(&version), sizeof version);
    if (!in || version != checkpoint_version) {
        throw LoadError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
    }
    in.read(reinterpret_cast<char*>(&n), sizeof n);
    std::string text(n, '\0');
    in.read(text.data(), n);
    if (!in) {
        throw LoadError(path.string() + ": truncated header");
    }
    const json header = detail::parse_json(text, path.string());
    const Architecture arch = architecture_from_json(detail::field<json>(header, "architecture", path.string()), path.string());
    std::uint64_t count = 0;
    in.read(reinterpret_cast<char*>(&count), sizeof count);
    if (!in || count > (1ull << 32)) {
        throw LoadError(path.string() + ": truncated parameter block");
    }
    std::vector<double> params(count);
    in.read(reinterpret_cast<char*>(params.data()), static_cast<std::streamsize>(count * sizeof(double)));
    if (!in) {
        throw LoadError(path.string() + ": truncated parameter block");
    }
    return Classifier::from_params(arch, std::move(params));
}

} // namespace red

#endif // RED_DATAIO_HPP
