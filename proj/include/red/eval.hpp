#ifndef RED_EVAL_HPP
#define RED_EVAL_HPP

// Experiment harness: configuration, the three study runners, reports and plots.

#include "red/attacks.hpp"
#include "red/dataio.hpp"
#include "red/inference.hpp"
#include "red/model.hpp"
#include "red/red.hpp"

#include <openssl/evp.h>

#include <cstdio>
#include <cstdlib>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace red {

// ---------------------------------------------------------------------------------------------
// Small text helpers
// ---------------------------------------------------------------------------------------------

inline std::string trim(const std::string& s)
{
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) {
        return "";
    }
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s)
{
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) {
            out.push_back(item);
        }
    }
    return out;
}

/// Shortest decimal that reads back to the same double.
inline std::string fmt_double(double v)
{
    char buf[40];
    for (int prec = 1; prec <= 17; ++prec) {
        std::snprintf(buf, sizeof buf, "%.*g", prec, v);
        if (std::strtod(buf, nullptr) == v) {
            break;
        }
    }
    return buf;
}

/// Git-style content hash: sha1("blob <size>\0" + bytes), hex.
inline std::string blob_hash(const std::string& bytes)
{
    const std::string header = "blob " + std::to_string(bytes.size()) + std::string(1, '\0');
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr);
    EVP_DigestUpdate(ctx, header.data(), header.size());
    EVP_DigestUpdate(ctx, bytes.data(), bytes.size());
    EVP_DigestFinal_ex(ctx, md, &len);
    EVP_MD_CTX_free(ctx);
    std::ostringstream os;
    for (unsigned int i = 0; i < len; ++i) {
        os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
    }
    return os.str();
}

inline std::string dataset_bytes(const Dataset& ds)
{
    std::string out;
    for (const auto& ex : ds.examples) {
        out.append(reinterpret_cast<const char*>(&ex.label), sizeof ex.label);
        out.append(reinterpret_cast<const char*>(ex.image.data.data()), ex.image.data.size() * sizeof(double));
    }
    return out;
}

// ---------------------------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------------------------

struct ExperimentConfig {
    // data
    std::string dataset = "synth"; // "synth" or a dataset directory (baseline defenses only)
    int classes = 4;
    int train_per_class = 50;
    int test_per_class = 25;
    int side = 30;
    // defenses
    int grid_size = 3;
    std::string ablation = "tile:a=10";
    std::vector<std::string> defenses{"none", "derandomized", "red"};
    int band_width = 4;
    int band_samples = 6; // band ablations per example per epoch when training
    // training
    std::vector<std::uint64_t> seeds{0, 1, 2};
    int epochs = 20;
    int red_epochs = 30;
    int warmup = 5;
    int period = 10;
    int batch = 16;
    double lr_model = 1e-2;
    double lr_pattern = 5e-2;
    std::string optimizer = "sgd";
    std::vector<int> conv{16, 32};
    int hidden = 64;
    // attacks
    std::vector<std::string> attacks{"clean", "sticker", "rectangle:0.1", "rectangle:0.3"};
    int iterations = 100;
    double step = 0.01;
    double eps = 1.0;
    int stride = 0;
    int screen_iterations = 10;
    int sub_patch = 6;
    int restarts = 1;
    int eval_limit = 0; // test examples evaluated per seed, 0 = all
    std::string aa_attack = "rectangle:0.1";
    int aa_iterations = 10;
    // grid-size study
    std::vector<int> grid_sizes{1, 3, 5, 10};
    std::vector<int> mask_sizes{11, 13, 15, 19, 30};
    int study_mask = 11;
    int study_ablations = 4;
    int draws = 10;
    // shape study
    std::vector<std::string> shapes{"rectangle", "triangle", "multi"};
    std::vector<double> budgets{0.0, 0.05, 0.1, 0.25, 0.3};
    std::vector<std::string> shape_defenses{"baseline", "red"};
    // output
    std::string output;
    bool plots = false;

    struct Key {
        std::string name;
        std::function<std::string(const ExperimentConfig&)> get;
        std::function<void(ExperimentConfig&, const std::string&)> set;
    };

    static const std::vector<Key>& keys()
    {
        auto I = [](const std::string& v) {
            std::size_t used = 0;
            const int r = std::stoi(v, &used);
            if (used != v.size()) {
                throw std::invalid_argument(v);
            }
            return r;
        };
        auto D = [](const std::string& v) {
            std::size_t used = 0;
            const double r = std::stod(v, &used);
            if (used != v.size()) {
                throw std::invalid_argument(v);
            }
            return r;
        };
        auto join = [](const auto& xs, auto fmt) {
            std::string s;
            for (std::size_t i = 0; i < xs.size(); ++i) {
                s += (i ? "," : "") + fmt(xs[i]);
            }
            return s;
        };
        auto str_id = [](const std::string& s) { return s; };
        auto int_s = [](auto v) { return std::to_string(v); };
#define RED_KEY_INT(k) {#k, [=](const ExperimentConfig& c) { return std::to_string(c.k); }, [=](ExperimentConfig& c, const std::string& v) { c.k = I(v); }}
#define RED_KEY_DBL(k) {#k, [=](const ExperimentConfig& c) { return fmt_double(c.k); }, [=](ExperimentConfig& c, const std::string& v) { c.k = D(v); }}
#define RED_KEY_STR(k) {#k, [=](const ExperimentConfig& c) { return c.k; }, [=](ExperimentConfig& c, const std::string& v) { c.k = v; }}
        static const std::vector<Key> table{
            RED_KEY_STR(dataset),
            RED_KEY_INT(classes),
            RED_KEY_INT(train_per_class),
            RED_KEY_INT(test_per_class),
            RED_KEY_INT(side),
            RED_KEY_INT(grid_size),
            RED_KEY_STR(ablation),
            {"defenses", [=](const ExperimentConfig& c) { return join(c.defenses, str_id); },
             [=](ExperimentConfig& c, const std::string& v) { c.defenses = split_list(v); }},
            RED_KEY_INT(band_width),
            RED_KEY_INT(band_samples),
            {"seeds", [=](const ExperimentConfig& c) { return join(c.seeds, int_s); },
             [=](ExperimentConfig& c, const std::string& v) {
                 c.seeds.clear();
                 for (const auto& s : split_list(v)) {
                     c.seeds.push_back(static_cast<std::uint64_t>(I(s)));
                 }
             }},
            RED_KEY_INT(epochs),
            RED_KEY_INT(red_epochs),
            RED_KEY_INT(warmup),
            RED_KEY_INT(period),
            RED_KEY_INT(batch),
            RED_KEY_DBL(lr_model),
            RED_KEY_DBL(lr_pattern),
            RED_KEY_STR(optimizer),
            {"conv", [=](const ExperimentConfig& c) { return join(c.conv, int_s); },
             [=](ExperimentConfig& c, const std::string& v) {
                 c.conv.clear();
                 for (const auto& s : split_list(v)) {
                     c.conv.push_back(I(s));
                 }
             }},
            RED_KEY_INT(hidden),
            {"attacks", [=](const ExperimentConfig& c) { return join(c.attacks, str_id); },
             [=](ExperimentConfig& c, const std::string& v) { c.attacks = split_list(v); }},
            RED_KEY_INT(iterations),
            RED_KEY_DBL(step),
            RED_KEY_DBL(eps),
            RED_KEY_INT(stride),
            RED_KEY_INT(screen_iterations),
            RED_KEY_INT(sub_patch),
            RED_KEY_INT(restarts),
            RED_KEY_INT(eval_limit),
            RED_KEY_STR(aa_attack),
            RED_KEY_INT(aa_iterations),
            {"grid_sizes", [=](const ExperimentConfig& c) { return join(c.grid_sizes, int_s); },
             [=](ExperimentConfig& c, const std::string& v) {
                 c.grid_sizes.clear();
                 for (const auto& s : split_list(v)) {
                     c.grid_sizes.push_back(I(s));
                 }
             }},
            {"mask_sizes", [=](const ExperimentConfig& c) { return join(c.mask_sizes, int_s); },
             [=](ExperimentConfig& c, const std::string& v) {
                 c.mask_sizes.clear();
                 for (const auto& s : split_list(v)) {
                     c.mask_sizes.push_back(I(s));
                 }
             }},
            RED_KEY_INT(study_mask),
            RED_KEY_INT(study_ablations),
            RED_KEY_INT(draws),
            {"shapes", [=](const ExperimentConfig& c) { return join(c.shapes, str_id); },
             [=](ExperimentConfig& c, const std::string& v) { c.shapes = split_list(v); }},
            {"budgets", [=](const ExperimentConfig& c) { return join(c.budgets, [](double d) { return fmt_double(d); }); },
             [=](ExperimentConfig& c, const std::string& v) {
                 c.budgets.clear();
                 for (const auto& s : split_list(v)) {
                     c.budgets.push_back(D(s));
                 }
             }},
            {"shape_defenses", [=](const ExperimentConfig& c) { return join(c.shape_defenses, str_id); },
             [=](ExperimentConfig& c, const std::string& v) { c.shape_defenses = split_list(v); }},
            RED_KEY_STR(output),
            {"plots", [](const ExperimentConfig& c) { return std::string(c.plots ? "true" : "false"); },
             [](ExperimentConfig& c, const std::string& v) {
                 if (v != "true" && v != "false") {
                     throw std::invalid_argument(v);
                 }
                 c.plots = v == "true";
             }},
        };
#undef RED_KEY_INT
#undef RED_KEY_DBL
#undef RED_KEY_STR
        return table;
    }

    void set(const std::string& key, const std::string& value)
    {
        for (const auto& k : keys()) {
            if (k.name == key) {
                try {
                    k.set(*this, value);
                } catch (const std::exception&) {
                    throw ParseError("config key '" + key + "': invalid value '" + value + "'");
                }
                return;
            }
        }
        throw ParseError("unknown config key '" + key + "'");
    }

    /// "key=value" override, as given on the command line.
    void apply_override(const std::string& kv)
    {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) {
            throw ParseError("override '" + kv + "': expected key=value");
        }
        set(trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
    }

    [[nodiscard]] std::vector<std::pair<std::string, std::string>> entries() const
    {
        std::vector<std::pair<std::string, std::string>> out;
        for (const auto& k : keys()) {
            out.emplace_back(k.name, k.get(*this));
        }
        return out;
    }

    [[nodiscard]] AblationSpec ablation_spec() const { return parse_ablation(ablation); }

    [[nodiscard]] Architecture architecture() const
    {
        Architecture a;
        a.side = side;
        a.classes = classes;
        a.conv_channels = conv;
        a.hidden = hidden;
        return a;
    }

    [[nodiscard]] AttackSpec attack_spec(AttackShape shape, double budget) const
    {
        AttackSpec s;
        s.shape = shape;
        s.budget = budget;
        s.eps = eps;
        s.iterations = iterations;
        s.step = step;
        s.stride = stride;
        s.screen_iterations = screen_iterations;
        s.sub_patch = sub_patch;
        s.restarts = restarts;
        return s;
    }

    void validate() const
    {
        if (seeds.empty()) {
            throw ValidationError("config: at least one seed required");
        }
        if (classes < 2 || train_per_class < 1 || test_per_class < 1 || side < 12) {
            throw ValidationError("config: need classes >= 2, per-class counts >= 1, side >= 12");
        }
        if (!PatternGrid::supported(grid_size)) {
            throw ValidationError("config: unsupported grid_size " + std::to_string(grid_size));
        }
        ablation_spec().validate(side);
        for (const auto& d : defenses) {
            if (d != "none" && d != "derandomized" && d != "red" && d != "aa-red") {
                throw ValidationError("config: unknown defense '" + d + "'");
            }
        }
        for (const auto& d : shape_defenses) {
            if (d != "baseline" && d != "red") {
                throw ValidationError("config: unknown shape-study defense '" + d + "'");
            }
        }
        for (const auto& a : attacks) {
            parse_attack_cell(a);
        }
        for (const auto& s : shapes) {
            parse_shape(s);
        }
        for (double b : budgets) {
            if (b < 0.0 || b >= 1.0) {
                throw ValidationError("config: budgets must lie in [0, 1)");
            }
        }
        for (int g : grid_sizes) {
            if (!PatternGrid::supported(g)) {
                throw ValidationError("config: unsupported grid size " + std::to_string(g));
            }
        }
        for (int m : mask_sizes) {
            if (m < 1) {
                throw ValidationError("config: mask sizes must be positive");
            }
        }
        if (study_mask < 1 || draws < 1 || study_ablations < 0) {
            throw ValidationError("config: study mask/draws out of range");
        }
        if (band_width < 1 || band_width > side || band_samples < 0) {
            throw ValidationError("config: band settings out of range");
        }
        parse_optimizer(optimizer);
        parse_attack_cell(aa_attack);
        architecture().validate();
        attack_spec(AttackShape::rectangle, 0.1).validate();
        RedSchedule{warmup, period, red_epochs}.validate();
        if (epochs < 0 || batch < 1 || !(lr_model > 0) || !(lr_pattern > 0) || eval_limit < 0 || aa_iterations < 1) {
            throw ValidationError("config: training settings out of range");
        }
    }

    /// Grid-size study only: its masks must fit the image.
    void validate_study() const
    {
        for (int m : mask_sizes) {
            if (m > side) {
                throw ValidationError("config: mask size " + std::to_string(m) + " exceeds side " + std::to_string(side));
            }
        }
        if (study_mask > side) {
            throw ValidationError("config: study_mask exceeds side");
        }
    }

    /// "clean", "sticker" or "<shape>:<budget>".
    static std::pair<std::string, double> parse_attack_cell(const std::string& cell)
    {
        if (cell == "clean") {
            return {"clean", 0.0};
        }
        if (cell == "sticker") {
            return {"sticker", 0.0};
        }
        const auto colon = cell.find(':');
        if (colon == std::string::npos) {
            throw ParseError("attack '" + cell + "': expected clean, sticker or shape:budget");
        }
        const std::string shape = cell.substr(0, colon);
        parse_shape(shape);
        double b = 0.0;
        try {
            b = std::stod(cell.substr(colon + 1));
        } catch (const std::exception&) {
            throw ParseError("attack '" + cell + "': bad budget");
        }
        if (!(b > 0.0 && b < 1.0)) {
            throw ValidationError("attack '" + cell + "': budget must lie in (0, 1)");
        }
        return {shape, b};
    }
};

/// TOML-style `key = value` lines; '#' starts a comment; values may be quoted or [a, b] lists.
inline ExperimentConfig parse_config(const std::string& text, const std::string& ctx = "config")
{
    ExperimentConfig cfg;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) {
            line = line.substr(0, hash);
        }
        line = trim(line);
        if (line.empty()) {
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ParseError(ctx + ":" + std::to_string(lineno) + ": expected key = value");
        }
        const std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (value.size() >= 2 && ((value.front() == '"' && value.back() == '"') || (value.front() == '[' && value.back() == ']'))) {
            value = value.substr(1, value.size() - 2);
        }
        std::string cleaned;
        for (char ch : value) {
            if (ch != '"') {
                cleaned += ch;
            }
        }
        try {
            cfg.set(key, trim(cleaned));
        } catch (const ParseError& e) {
            throw ParseError(ctx + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return cfg;
}

inline std::string config_text(const ExperimentConfig& cfg)
{
    std::string out;
    for (const auto& [k, v] : cfg.entries()) {
        out += k + " = \"" + v + "\"\n";
    }
    return out;
}

/// Output root: explicit `output`, else $RED_OUTPUT_ROOT, else ./runs.
inline fs::path output_root(const ExperimentConfig& cfg)
{
    if (!cfg.output.empty()) {
        return cfg.output;
    }
    if (const char* env = std::getenv("RED_OUTPUT_ROOT"); env && *env) {
        return env;
    }
    return "runs";
}

// ---------------------------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------------------------

struct ReportRow {
    std::string defense;
    std::string attack;
    double budget = 0.0;
    std::size_t correct = 0;
    std::size_t n = 0;
    std::uint64_t seed = 0;

    [[nodiscard]] double accuracy() const { return n ? static_cast<double>(correct) / static_cast<double>(n) : 0.0; }
};

struct Aggregate {
    std::string defense;
    std::string attack;
    double budget = 0.0;
    double mean = 0.0;
    double stddev = 0.0;
    std::size_t seeds = 0;
};

struct EvalReport {
    std::string name;
    std::vector<std::pair<std::string, std::string>> config;
    std::map<std::string, std::string> artifacts; // label -> blob hash
    std::vector<ReportRow> rows;

    /// Mean and sample standard deviation of accuracy over seeds, per (defense, attack, budget),
    /// in first-appearance order.
    [[nodiscard]] std::vector<Aggregate> aggregates() const
    {
        std::vector<Aggregate> out;
        std::vector<std::vector<double>> vals;
        for (const auto& r : rows) {
            std::size_t i = 0;
            for (; i < out.size(); ++i) {
                if (out[i].defense == r.defense && out[i].attack == r.attack && out[i].budget == r.budget) {
                    break;
                }
            }
            if (i == out.size()) {
                out.push_back({r.defense, r.attack, r.budget, 0.0, 0.0, 0});
                vals.emplace_back();
            }
            vals[i].push_back(r.accuracy());
        }
        for (std::size_t i = 0; i < out.size(); ++i) {
            const auto& v = vals[i];
            double s = 0.0;
            for (double x : v) {
                s += x;
            }
            out[i].mean = s / static_cast<double>(v.size());
            double ss = 0.0;
            for (double x : v) {
                ss += (x - out[i].mean) * (x - out[i].mean);
            }
            out[i].stddev = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
            out[i].seeds = v.size();
        }
        return out;
    }

    [[nodiscard]] std::optional<Aggregate> find(const std::string& defense, const std::string& attack) const
    {
        for (const auto& a : aggregates()) {
            if (a.defense == defense && a.attack == attack) {
                return a;
            }
        }
        return std::nullopt;
    }

    [[nodiscard]] std::vector<ReportRow> select(const std::string& defense, const std::string& attack) const
    {
        std::vector<ReportRow> out;
        for (const auto& r : rows) {
            if (r.defense == defense && r.attack == attack) {
                out.push_back(r);
            }
        }
        return out;
    }

    [[nodiscard]] std::string rows_csv() const
    {
        std::string s = "defense,attack,budget,accuracy,correct,n,seed\n";
        for (const auto& r : rows) {
            s += r.defense + "," + r.attack + "," + fmt_double(r.budget) + "," + fmt_double(r.accuracy()) + ","
               + std::to_string(r.correct) + "," + std::to_string(r.n) + "," + std::to_string(r.seed) + "\n";
        }
        return s;
    }

    [[nodiscard]] std::string aggregates_csv() const
    {
        std::string s = "defense,attack,budget,mean,stddev,seeds\n";
        for (const auto& a : aggregates()) {
            s += a.defense + "," + a.attack + "," + fmt_double(a.budget) + "," + fmt_double(a.mean) + ","
               + fmt_double(a.stddev) + "," + std::to_string(a.seeds) + "\n";
        }
        return s;
    }

    [[nodiscard]] std::string summary_json() const
    {
        json j;
        j["report"] = name;
        json c = json::object();
        for (const auto& [k, v] : config) {
            c[k] = v;
        }
        j["config"] = c;
        json a = json::object();
        for (const auto& [k, v] : artifacts) {
            a[k] = v;
        }
        j["artifacts"] = a;
        json agg = json::array();
        for (const auto& x : aggregates()) {
            agg.push_back({{"defense", x.defense}, {"attack", x.attack}, {"budget", x.budget}, {"mean", x.mean},
                           {"stddev", x.stddev}, {"seeds", x.seeds}});
        }
        j["aggregates"] = agg;
        json rs = json::array();
        for (const auto& r : rows) {
            rs.push_back({{"defense", r.defense}, {"attack", r.attack}, {"budget", r.budget}, {"accuracy", r.accuracy()},
                          {"correct", r.correct}, {"n", r.n}, {"seed", r.seed}});
        }
        j["rows"] = rs;
        return j.dump(1) + "\n";
    }

    /// <dir>/<name>.csv, <name>_summary.csv and <name>.json
    void write(const fs::path& dir) const
    {
        write_text(dir / (name + ".csv"), rows_csv());
        write_text(dir / (name + "_summary.csv"), aggregates_csv());
        write_text(dir / (name + ".json"), summary_json());
    }
};

// ---------------------------------------------------------------------------------------------
// Plots
// ---------------------------------------------------------------------------------------------

struct Raster {
    int height = 0, width = 0;
    std::vector<png_byte> rgb;

    Raster(int h, int w, std::array<png_byte, 3> fill = {255, 255, 255}) : height(h), width(w), rgb(static_cast<std::size_t>(h) * w * 3)
    {
        for (std::size_t i = 0; i < rgb.size(); i += 3) {
            rgb[i] = fill[0];
            rgb[i + 1] = fill[1];
            rgb[i + 2] = fill[2];
        }
    }

    void put(int y, int x, std::array<png_byte, 3> c)
    {
        if (y < 0 || x < 0 || y >= height || x >= width) {
            return;
        }
        const std::size_t i = (static_cast<std::size_t>(y) * width + x) * 3;
        rgb[i] = c[0];
        rgb[i + 1] = c[1];
        rgb[i + 2] = c[2];
    }

    void fill_rect(int top, int left, int h, int w, std::array<png_byte, 3> c)
    {
        for (int y = top; y < top + h; ++y) {
            for (int x = left; x < left + w; ++x) {
                put(y, x, c);
            }
        }
    }

    void save(const fs::path& path) const
    {
        if (path.has_parent_path()) {
            fs::create_directories(path.parent_path());
        }
        write_png_rgb8(path, height, width, rgb);
    }

    [[nodiscard]] std::string bytes() const { return {rgb.begin(), rgb.end()}; }
};

/// Every class pattern rendered at `side` px, magnified `scale` times, with black cell grid
/// lines; classes left to right separated by a white gutter.
inline Raster pattern_visual(const PatternSet& set, int side, int scale = 10)
{
    set.validate();
    const int tile = side * scale;
    const int gap = scale;
    const int k = set.classes();
    Raster r(tile, k * tile + (k - 1) * gap);
    const auto bounds = cell_bounds(side, set.grid_size);
    for (int c = 0; c < k; ++c) {
        const Image img = render_pattern(set.grids[c], side);
        const int x0 = c * (tile + gap);
        for (int y = 0; y < tile; ++y) {
            for (int x = 0; x < tile; ++x) {
                const int sy = y / scale, sx = x / scale;
                r.put(y, x0 + x, {to_byte(img.at(0, sy, sx)), to_byte(img.at(1, sy, sx)), to_byte(img.at(2, sy, sx))});
            }
        }
        for (int b : bounds) {
            const int p = std::min(b * scale, tile - 1);
            for (int t = 0; t < tile; ++t) {
                r.put(p, x0 + t, {0, 0, 0});
                r.put(t, x0 + p, {0, 0, 0});
            }
        }
    }
    return r;
}

/// Bar chart of aggregate means (one bar per aggregate, in report order) plus the CSV behind it.
/// Returns the written paths.
inline std::vector<fs::path> emit_plots(const EvalReport& report, const fs::path& dir)
{
    const auto aggs = report.aggregates();
    if (aggs.empty()) {
        throw ValidationError("cannot plot an empty report");
    }
    fs::create_directories(dir);
    const int bar = 16, gap = 6, height = 200, margin = 10;
    const int n = static_cast<int>(aggs.size());
    Raster r(height + 2 * margin, n * (bar + gap) + 2 * margin - gap);
    std::map<std::string, std::array<png_byte, 3>> colors;
    static constexpr std::array<std::array<png_byte, 3>, 6> palette{
        {{31, 119, 180}, {255, 127, 14}, {44, 160, 44}, {214, 39, 40}, {148, 103, 189}, {140, 86, 75}}};
    for (int i = 0; i < n; ++i) {
        const auto& a = aggs[i];
        if (!colors.count(a.defense)) {
            colors[a.defense] = palette[colors.size() % palette.size()];
        }
        const int h = static_cast<int>(std::lround(a.mean * height));
        r.fill_rect(margin + height - h, margin + i * (bar + gap), h, bar, colors[a.defense]);
    }
    r.fill_rect(margin + height, 0, 1, r.width, {0, 0, 0});
    const fs::path png = dir / (report.name + "_bars.png");
    const fs::path csv = dir / (report.name + "_bars.csv");
    r.save(png);
    write_text(csv, report.aggregates_csv());
    return {png, csv};
}

// ---------------------------------------------------------------------------------------------
// Runners
// ---------------------------------------------------------------------------------------------

enum class ArtifactMode {
    train,   // always train and overwrite
    reuse,   // load when present, train otherwise
    require  // load; missing artifact is an error
};

struct RunOptions {
    ArtifactMode artifacts = ArtifactMode::train;
    std::ostream* log = nullptr;
};

namespace detail {

inline void note(const RunOptions& o, const std::string& msg)
{
    if (o.log) {
        *o.log << msg << std::endl;
    }
}

struct SeedData {
    Dataset train;
    Dataset test;
};

inline SeedData seed_data(const ExperimentConfig& cfg, std::uint64_t seed)
{
    if (cfg.dataset != "synth") {
        throw ValidationError("experiment runners need the synthetic dataset (pattern training renders sign templates)");
    }
    return {synth_dataset(cfg.classes, cfg.train_per_class, cfg.side, mix_seed(seed, 11)),
            synth_dataset(cfg.classes, cfg.test_per_class, cfg.side, mix_seed(seed, 12))};
}

inline TrainConfig train_config(const ExperimentConfig& cfg, std::uint64_t seed, const AblationSpec& ab)
{
    TrainConfig t;
    t.epochs = cfg.epochs;
    t.batch_size = cfg.batch;
    t.lr_model = cfg.lr_model;
    t.lr_pattern = cfg.lr_pattern;
    t.seed = seed;
    t.ablation = ab;
    t.optimizer = parse_optimizer(cfg.optimizer);
    return t;
}

inline fs::path artifact_dir(const ExperimentConfig& cfg, std::uint64_t seed)
{
    return output_root(cfg) / "artifacts" / ("seed" + std::to_string(seed));
}

inline bool should_load(const RunOptions& o, const fs::path& path)
{
    if (o.artifacts == ArtifactMode::require) {
        if (!fs::exists(path)) {
            throw LoadError("missing artifact " + path.string() + " (run without --no-train first)");
        }
        return true;
    }
    return o.artifacts == ArtifactMode::reuse && fs::exists(path);
}

inline void record(EvalReport& report, const std::string& label, const fs::path& path)
{
    report.artifacts[label] = blob_hash(read_text(path));
}

/// Clean-trained classifier on the current-design training images.
inline Classifier baseline_model(const ExperimentConfig& cfg, std::uint64_t seed, const std::string& name,
                                 const AblationSpec& ab, int per_example, const Dataset& train, const RunOptions& o,
                                 EvalReport& report)
{
    const fs::path path = artifact_dir(cfg, seed) / (name + ".ckpt");
    if (!should_load(o, path)) {
        note(o, "  training " + name + " (seed " + std::to_string(seed) + ")");
        TrainConfig t = train_config(cfg, seed, ab);
        t.ablations_per_example = per_example;
        Architecture arch = cfg.architecture();
        auto res = train_clean(Classifier(arch, mix_seed(seed, 1)), train, ab, t);
        save_checkpoint(res.model, path, {{"defense", name}, {"ablation", ab.str()}, {"seed", seed}});
    }
    record(report, name + ".seed" + std::to_string(seed) + ".ckpt", path);
    return load_checkpoint(path);
}

struct PatternModel {
    PatternSet patterns;
    Classifier model;
};

inline PatternModel red_model(const ExperimentConfig& cfg, std::uint64_t seed, const std::string& name,
                              const AblationSpec& ab, int grid_size, bool train_patterns, int per_example,
                              const Dataset& train, const RunOptions& o, EvalReport& report, bool attacker_aware = false)
{
    const fs::path ckpt = artifact_dir(cfg, seed) / (name + ".ckpt");
    const fs::path pat = artifact_dir(cfg, seed) / (name + ".red.json");
    if (!(should_load(o, ckpt) && should_load(o, pat))) {
        note(o, "  training " + name + " (seed " + std::to_string(seed) + ")");
        RedConfig rc;
        rc.train = train_config(cfg, seed, ab);
        rc.train.ablations_per_example = per_example;
        rc.arch = cfg.architecture();
        rc.grid_size = grid_size;
        rc.train_patterns = train_patterns;
        if (!train_patterns) {
            rc.init_patterns = native_patterns(train.templates);
        }
        const RedSchedule sched{cfg.warmup, cfg.period, cfg.red_epochs};
        RedResult res;
        if (attacker_aware) {
            const auto [shape, budget] = ExperimentConfig::parse_attack_cell(cfg.aa_attack);
            AttackSpec as = cfg.attack_spec(parse_shape(shape), budget);
            as.iterations = cfg.aa_iterations;
            as.screen_iterations = 0;
            res = optimize_aa_red(train, ab, as, sched, rc);
        } else {
            res = optimize_red(train, ab, sched, rc);
        }
        save_checkpoint(res.model, ckpt, {{"defense", name}, {"ablation", ab.str()}, {"seed", seed}, {"grid_size", grid_size}});
        save_pattern_set(res.patterns, pat);
    }
    record(report, name + ".seed" + std::to_string(seed) + ".ckpt", ckpt);
    record(report, name + ".seed" + std::to_string(seed) + ".red.json", pat);
    return {load_pattern_set(pat), load_checkpoint(ckpt)};
}

inline std::vector<LabeledExample> limited(const Dataset& ds, int limit)
{
    std::vector<LabeledExample> out = ds.examples;
    if (limit > 0 && static_cast<std::size_t>(limit) < out.size()) {
        // even stride keeps the class balance of a class-major dataset
        std::vector<LabeledExample> pick;
        const double stride = static_cast<double>(out.size()) / limit;
        for (int i = 0; i < limit; ++i) {
            pick.push_back(out[static_cast<std::size_t>(i * stride)]);
        }
        out = std::move(pick);
    }
    return out;
}

/// Accuracy of `defense` under one attack cell.
inline ReportRow evaluate_cell(const Classifier& f, const Defense& defense, const std::vector<LabeledExample>& test,
                               const std::string& defense_name, const std::string& attack_name, AttackShape shape,
                               double budget, bool clean, const ExperimentConfig& cfg, std::uint64_t seed)
{
    ReportRow row{defense_name, attack_name, budget, 0, test.size(), seed};
    const AttackSpec spec = cfg.attack_spec(shape, budget > 0 ? budget : 0.5);
    for (const auto& ex : test) {
        Image x = ex.image;
        if (!clean) {
            x = run_attack(f, ex.image, ex.label, spec, defense).image;
        }
        row.correct += defense.predict(f, x).predicted == ex.label ? 1 : 0;
    }
    return row;
}

inline std::string budget_label(double b)
{
    std::ostringstream os;
    os << std::lround(b * 100) << "%";
    return os.str();
}

} // namespace detail

/// {none, derandomized, red[, aa-red]} x {clean, sticker, patch budgets}.
inline EvalReport run_table1(const ExperimentConfig& cfg, const RunOptions& o = {})
{
    cfg.validate();
    EvalReport report;
    report.name = "table1";
    report.config = cfg.entries();
    const AblationSpec red_ab = cfg.ablation_spec();
    const AblationSpec none_ab{AblationKind::tile, cfg.side, 1, 0};
    const AblationSpec band_ab{AblationKind::band, cfg.band_width, 1, 0};
    for (auto seed : cfg.seeds) {
        detail::note(o, "table1 seed " + std::to_string(seed));
        const auto data = detail::seed_data(cfg, seed);
        report.artifacts["train.seed" + std::to_string(seed)] = blob_hash(dataset_bytes(data.train));
        report.artifacts["test.seed" + std::to_string(seed)] = blob_hash(dataset_bytes(data.test));
        for (const auto& d : cfg.defenses) {
            Classifier f;
            Defense defense;
            Dataset test = data.test;
            if (d == "none") {
                f = detail::baseline_model(cfg, seed, "none", none_ab, 0, data.train, o, report);
                defense = Defense::plain(cfg.side);
            } else if (d == "derandomized") {
                f = detail::baseline_model(cfg, seed, "derandomized", band_ab, cfg.band_samples, data.train, o, report);
                defense = Defense::ablated("derandomized", band_ab, cfg.side);
            } else {
                auto pm = detail::red_model(cfg, seed, d, red_ab, cfg.grid_size, true, 0, data.train, o, report, d == "aa-red");
                f = std::move(pm.model);
                test = restyle(data.test, pm.patterns);
                defense = Defense::ablated(d, red_ab, cfg.side);
            }
            const auto examples = detail::limited(test, cfg.eval_limit);
            for (const auto& cell : cfg.attacks) {
                const auto [shape, budget] = ExperimentConfig::parse_attack_cell(cell);
                const bool clean = shape == "clean";
                const AttackShape s = clean ? AttackShape::rectangle : parse_shape(shape);
                const std::string label = clean || shape == "sticker" ? shape : shape + " " + detail::budget_label(budget);
                report.rows.push_back(detail::evaluate_cell(f, defense, examples, d, label, s, budget, clean, cfg, seed));
                detail::note(o, "  " + d + " / " + label + ": " + fmt_double(report.rows.back().accuracy()));
            }
        }
    }
    return report;
}

/// Accuracy of one random a x a ablation (averaged over `draws` placements per image) for the
/// current design (g = 1, untrained native backgrounds) and for patterns of each grid size.
inline EvalReport run_gridsize_study(const ExperimentConfig& cfg, const RunOptions& o = {})
{
    cfg.validate();
    cfg.validate_study();
    EvalReport report;
    report.name = "gridsize";
    report.config = cfg.entries();
    const AblationSpec train_ab{AblationKind::random, cfg.study_mask, 1, 0};
    for (auto seed : cfg.seeds) {
        detail::note(o, "gridsize seed " + std::to_string(seed));
        const auto data = detail::seed_data(cfg, seed);
        report.artifacts["train.seed" + std::to_string(seed)] = blob_hash(dataset_bytes(data.train));
        report.artifacts["test.seed" + std::to_string(seed)] = blob_hash(dataset_bytes(data.test));
        for (int g : cfg.grid_sizes) {
            const std::string name = g == 1 ? "current" : "S" + std::to_string(g);
            auto pm = detail::red_model(cfg, seed, "grid_" + name, train_ab, g, g != 1, cfg.study_ablations, data.train,
                                        o, report);
            const Dataset test = restyle(data.test, pm.patterns);
            const auto examples = detail::limited(test, cfg.eval_limit);
            for (int a : cfg.mask_sizes) {
                ReportRow row{name, "mask a=" + std::to_string(a), static_cast<double>(a * a) / (cfg.side * cfg.side), 0,
                              examples.size() * static_cast<std::size_t>(cfg.draws), seed};
                Rng rng(mix_seed(seed, 500 + static_cast<std::uint64_t>(a)));
                for (const auto& ex : examples) {
                    for (int d = 0; d < cfg.draws; ++d) {
                        row.correct += single_predict(pm.model, ex.image, a, rng) == ex.label ? 1 : 0;
                    }
                }
                report.rows.push_back(row);
                detail::note(o, "  " + name + " / a=" + std::to_string(a) + ": " + fmt_double(row.accuracy()));
            }
        }
    }
    return report;
}

/// Tile-vote accuracy per attack shape and budget, current design vs RED patterns.
inline EvalReport run_shape_study(const ExperimentConfig& cfg, const RunOptions& o = {})
{
    cfg.validate();
    EvalReport report;
    report.name = "shapes";
    report.config = cfg.entries();
    const AblationSpec ab = cfg.ablation_spec();
    for (auto seed : cfg.seeds) {
        detail::note(o, "shapes seed " + std::to_string(seed));
        const auto data = detail::seed_data(cfg, seed);
        report.artifacts["train.seed" + std::to_string(seed)] = blob_hash(dataset_bytes(data.train));
        report.artifacts["test.seed" + std::to_string(seed)] = blob_hash(dataset_bytes(data.test));
        for (const auto& d : cfg.shape_defenses) {
            Classifier f;
            Dataset test = data.test;
            if (d == "baseline") {
                f = detail::baseline_model(cfg, seed, "baseline_tile", ab, 0, data.train, o, report);
            } else {
                auto pm = detail::red_model(cfg, seed, "red", ab, cfg.grid_size, true, 0, data.train, o, report);
                f = std::move(pm.model);
                test = restyle(data.test, pm.patterns);
            }
            const Defense defense = Defense::ablated(d, ab, cfg.side);
            const auto examples = detail::limited(test, cfg.eval_limit);
            std::optional<ReportRow> clean;
            for (const auto& sh : cfg.shapes) {
                for (double b : cfg.budgets) {
                    ReportRow row;
                    if (b == 0.0) {
                        if (!clean) {
                            clean = detail::evaluate_cell(f, defense, examples, d, sh, AttackShape::rectangle, 0.0, true, cfg, seed);
                        }
                        row = *clean;
                        row.attack = sh;
                    } else {
                        row = detail::evaluate_cell(f, defense, examples, d, sh, parse_shape(sh), b, false, cfg, seed);
                    }
                    report.rows.push_back(row);
                    detail::note(o, "  " + d + " / " + sh + " " + detail::budget_label(b) + ": " + fmt_double(row.accuracy()));
                }
            }
        }
    }
    return report;
}

} // namespace red

#endif // RED_EVAL_HPP
