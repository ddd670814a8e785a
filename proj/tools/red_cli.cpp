// red: train, attack, evaluate and inspect robust sign backgrounds.

#include "red/attacks.hpp"
#include "red/dataio.hpp"
#include "red/eval.hpp"
#include "red/inference.hpp"
#include "red/red.hpp"

#include <CLI11.hpp>

#include <iostream>

using namespace red;

namespace {

struct Common {
    std::string config_file;
    std::vector<std::string> overrides;
    std::string out;
};

void add_common(CLI::App* app, Common& c)
{
    app->add_option("--config", c.config_file, "TOML-style key = value config file");
    app->add_option("--set", c.overrides, "override a config key (key=value), repeatable");
    app->add_option("--out", c.out, "output directory (default $RED_OUTPUT_ROOT or ./runs)");
}

ExperimentConfig resolve(const Common& c)
{
    ExperimentConfig cfg;
    if (!c.config_file.empty()) {
        cfg = parse_config(read_text(c.config_file), c.config_file);
    }
    for (const auto& kv : c.overrides) {
        cfg.apply_override(kv);
    }
    if (!c.out.empty()) {
        cfg.output = c.out;
    }
    cfg.validate();
    return cfg;
}

std::string loss_csv(const std::vector<double>& trace)
{
    std::string s = "epoch,loss\n";
    for (std::size_t i = 0; i < trace.size(); ++i) {
        s += std::to_string(i) + "," + fmt_double(trace[i]) + "\n";
    }
    return s;
}

std::string accuracy_csv(const std::vector<std::tuple<std::string, std::size_t, std::size_t>>& rows)
{
    std::string s = "split,accuracy,correct,n\n";
    for (const auto& [split, correct, n] : rows) {
        s += split + "," + fmt_double(static_cast<double>(correct) / static_cast<double>(n)) + "," + std::to_string(correct)
           + "," + std::to_string(n) + "\n";
    }
    return s;
}

std::size_t vote_correct(const Classifier& f, const std::vector<LabeledExample>& xs, const std::vector<Mask>& masks)
{
    std::size_t c = 0;
    for (const auto& ex : xs) {
        c += vote_predict(f, ex.image, masks).predicted == ex.label ? 1 : 0;
    }
    return c;
}

Dataset synth_split(const ExperimentConfig& cfg, bool train)
{
    const auto seed = cfg.seeds.front();
    return synth_dataset(cfg.classes, train ? cfg.train_per_class : cfg.test_per_class, cfg.side,
                         mix_seed(seed, train ? 11 : 12));
}

AblationSpec defense_ablation(const std::string& text, int side)
{
    if (text == "none") {
        return {AblationKind::tile, side, 1, 0};
    }
    return parse_ablation(text);
}

void warn_remainder(const AblationSpec& ab, int side)
{
    if (ab.kind == AblationKind::tile && side % ab.size != 0) {
        std::cerr << "warning: tile size " << ab.size << " does not divide " << side << "; the last " << side % ab.size
                  << " rows/cols are never retained\n";
    }
}

int train_baseline(const Common& c, const std::string& data_dir, std::string ablation)
{
    const auto cfg = resolve(c);
    if (ablation.empty()) {
        ablation = cfg.ablation;
    }
    const AblationSpec ab = defense_ablation(ablation, cfg.side);
    warn_remainder(ab, cfg.side);
    Dataset train, test;
    if (!data_dir.empty()) {
        train = load_dataset(data_dir, {cfg.side, 0});
    } else {
        train = synth_split(cfg, true);
        test = synth_split(cfg, false);
    }
    TrainConfig tc;
    tc.epochs = cfg.epochs;
    tc.batch_size = cfg.batch;
    tc.lr_model = cfg.lr_model;
    tc.seed = cfg.seeds.front();
    tc.ablation = ab;
    tc.optimizer = parse_optimizer(cfg.optimizer);
    tc.ablations_per_example = ab.kind == AblationKind::band ? cfg.band_samples : 0;
    Architecture arch = cfg.architecture();
    arch.classes = train.classes;
    auto res = train_clean(Classifier(arch, mix_seed(tc.seed, 1)), train, ab, tc);
    const fs::path out = output_root(cfg);
    save_checkpoint(res.model, out / "baseline.ckpt", {{"ablation", ab.str()}, {"seed", tc.seed}});
    write_text(out / "baseline_loss.csv", loss_csv(res.loss_trace));
    const auto masks = ablation_family(ab, cfg.side, cfg.side);
    std::vector<std::tuple<std::string, std::size_t, std::size_t>> rows{
        {"train", vote_correct(res.model, train.examples, masks), train.size()}};
    if (!test.empty()) {
        rows.emplace_back("test", vote_correct(res.model, test.examples, masks), test.size());
    }
    write_text(out / "baseline_report.csv", accuracy_csv(rows));
    write_text(out / "baseline_config.toml", config_text(cfg));
    std::cout << "wrote " << (out / "baseline.ckpt").string() << "\n";
    return 0;
}

int train_red(const Common& c, bool attacker_aware)
{
    const auto cfg = resolve(c);
    const AblationSpec ab = cfg.ablation_spec();
    warn_remainder(ab, cfg.side);
    const Dataset train = synth_split(cfg, true);
    const Dataset test = synth_split(cfg, false);
    RedConfig rc;
    rc.train.epochs = cfg.red_epochs;
    rc.train.batch_size = cfg.batch;
    rc.train.lr_model = cfg.lr_model;
    rc.train.lr_pattern = cfg.lr_pattern;
    rc.train.seed = cfg.seeds.front();
    rc.train.ablation = ab;
    rc.train.optimizer = parse_optimizer(cfg.optimizer);
    rc.arch = cfg.architecture();
    rc.grid_size = cfg.grid_size;
    const RedSchedule sched{cfg.warmup, cfg.period, cfg.red_epochs};
    RedResult res;
    const std::string name = attacker_aware ? "aa_red" : "red";
    if (attacker_aware) {
        const auto [shape, budget] = ExperimentConfig::parse_attack_cell(cfg.aa_attack);
        AttackSpec as = cfg.attack_spec(parse_shape(shape), budget);
        as.iterations = cfg.aa_iterations;
        as.screen_iterations = 0;
        res = optimize_aa_red(train, ab, as, sched, rc);
    } else {
        res = optimize_red(train, ab, sched, rc);
    }
    const fs::path out = output_root(cfg);
    save_pattern_set(res.patterns, out / (name + ".red.json"));
    save_checkpoint(res.model, out / (name + ".ckpt"), {{"ablation", ab.str()}, {"grid_size", cfg.grid_size}});
    write_text(out / (name + "_loss.csv"), loss_csv(res.loss_trace));
    const auto masks = ablation_family(ab, cfg.side, cfg.side);
    const Dataset rtrain = restyle(train, res.patterns);
    const Dataset rtest = restyle(test, res.patterns);
    write_text(out / (name + "_report.csv"),
               accuracy_csv({{"train", vote_correct(res.model, rtrain.examples, masks), rtrain.size()},
                             {"test", vote_correct(res.model, rtest.examples, masks), rtest.size()}}));
    write_text(out / (name + "_config.toml"), config_text(cfg));
    std::cout << "wrote " << (out / (name + ".red.json")).string() << "\n";
    return 0;
}

struct AttackArgs {
    std::string checkpoint, patterns, data, ablation = "none", shape = "rectangle";
    double budget = 0.1, eps = 1.0, step = 0.01;
    int iters = 100, sub_patch = 6, limit = 0;
};

int attack_cmd(const Common& c, const AttackArgs& a)
{
    const auto cfg = resolve(c);
    const Classifier f = load_checkpoint(a.checkpoint);
    Dataset ds;
    if (!a.data.empty()) {
        ds = load_dataset(a.data, {f.side(), f.classes()});
    } else {
        ds = synth_split(cfg, false);
        if (!a.patterns.empty()) {
            ds = restyle(ds, load_pattern_set(a.patterns));
        }
    }
    const AblationSpec ab = defense_ablation(a.ablation, f.side());
    const Defense defense = a.ablation == "none" ? Defense::plain(f.side()) : Defense::ablated(a.ablation, ab, f.side());
    AttackSpec spec = cfg.attack_spec(parse_shape(a.shape), a.budget);
    spec.eps = a.eps;
    spec.iterations = a.iters;
    spec.step = a.step;
    spec.sub_patch = a.sub_patch;
    const auto examples = detail::limited(ds, a.limit);
    const fs::path out = output_root(cfg);
    fs::create_directories(out);
    std::string manifest = "filename,shape,budget,success\n";
    std::size_t successes = 0;
    for (std::size_t i = 0; i < examples.size(); ++i) {
        const auto adv = run_attack(f, examples[i].image, examples[i].label, spec, defense);
        char name[32];
        std::snprintf(name, sizeof name, "adv_%05zu.png", i);
        write_png(out / name, adv.image);
        manifest += std::string(name) + "," + a.shape + "," + fmt_double(a.budget) + "," + (adv.success ? "1" : "0") + "\n";
        successes += adv.success ? 1 : 0;
    }
    write_text(out / "manifest.csv", manifest);
    std::cout << "success rate " << successes << "/" << examples.size() << "\n";
    return 0;
}

int predict_cmd(const std::string& checkpoint, const std::string& image, const std::string& ablation, int patch_side)
{
    const Classifier f = load_checkpoint(checkpoint);
    const Image x = resize_bilinear(read_png(image), f.side(), f.side());
    const AblationSpec ab = defense_ablation(ablation, f.side());
    const auto vote = vote_predict(f, x, ab);
    std::cout << "class " << vote.predicted << "\nhistogram";
    for (int h : vote.histogram) {
        std::cout << " " << h;
    }
    std::cout << "\nmargin " << vote.margin << "\n";
    if (ab.kind == AblationKind::tile) {
        std::cout << "certified(b=" << patch_side << ") " << (certified_margin(vote, ab, patch_side) ? "yes" : "no") << "\n";
    }
    return 0;
}

int eval_cmd(const Common& c, const std::string& which, bool no_train, bool reuse, bool plots)
{
    auto cfg = resolve(c);
    if (plots) {
        cfg.plots = true;
    }
    RunOptions o;
    o.artifacts = no_train ? ArtifactMode::require : reuse ? ArtifactMode::reuse : ArtifactMode::train;
    o.log = &std::cerr;
    EvalReport report;
    if (which == "table1") {
        report = run_table1(cfg, o);
    } else if (which == "gridsize") {
        report = run_gridsize_study(cfg, o);
    } else {
        report = run_shape_study(cfg, o);
    }
    const fs::path out = output_root(cfg) / "reports";
    report.write(out);
    if (cfg.plots) {
        emit_plots(report, out / "plots");
    }
    std::cout << report.aggregates_csv();
    return 0;
}

int render_pattern_cmd(const std::string& patterns, const std::string& out, int side, int scale)
{
    pattern_visual(load_pattern_set(patterns), side, scale).save(out);
    std::cout << "wrote " << out << "\n";
    return 0;
}

int calibrate_cmd(const Common& c, std::uint64_t seed)
{
    const auto cfg = resolve(c);
    const fs::path out = output_root(cfg);
    const auto& kelly = kelly_colors();
    const int sw = 40;
    Raster chart(2 * sw, 11 * sw);
    for (std::size_t i = 0; i < kelly.size(); ++i) {
        const auto& k = kelly[i];
        chart.fill_rect(static_cast<int>(i / 11) * sw, static_cast<int>(i % 11) * sw, sw, sw,
                        {to_byte(k[0]), to_byte(k[1]), to_byte(k[2])});
    }
    chart.save(out / "kelly_chart.png");
    for (const auto& m : synth_conditions(seed)) {
        save_color_model(m, out / ("color_" + m.condition + ".json"));
        std::cout << m.condition << " fit mse " << fmt_double(m.fit_mse) << "\n";
    }
    return 0;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Robust environmental design: learn sign backgrounds that survive patch attacks"};
    app.require_subcommand(1);

    Common common;

    int synth_classes = 4, synth_n = 50, synth_side = 30;
    std::uint64_t synth_seed = 0;
    std::string synth_out;
    auto* synth = app.add_subcommand("synth", "write a synthetic dataset directory");
    synth->add_option("--classes", synth_classes);
    synth->add_option("--per-class", synth_n);
    synth->add_option("--side", synth_side);
    synth->add_option("--seed", synth_seed);
    synth->add_option("--out", synth_out)->required();

    std::string base_data, base_ablation;
    auto* tb = app.add_subcommand("train-baseline", "train a classifier on ablated current-design images");
    add_common(tb, common);
    tb->add_option("--data", base_data, "dataset directory (default: synthetic)");
    tb->add_option("--ablation", base_ablation, "none | tile:a=10 | band:w=4 | random:a=10,m=25");

    auto* tr = app.add_subcommand("train-red", "learn per-class patterns jointly with the classifier");
    add_common(tr, common);
    auto* ta = app.add_subcommand("train-aa-red", "pattern learning with an attacker in the loop");
    add_common(ta, common);

    AttackArgs aa;
    auto* at = app.add_subcommand("attack", "attack a trained classifier and write adversarial images");
    add_common(at, common);
    at->add_option("--checkpoint", aa.checkpoint)->required();
    at->add_option("--patterns", aa.patterns, "pattern file used to render the synthetic test set");
    at->add_option("--data", aa.data);
    at->add_option("--ablation", aa.ablation, "defense: none or an ablation spec");
    at->add_option("--shape", aa.shape);
    at->add_option("--budget", aa.budget);
    at->add_option("--eps", aa.eps);
    at->add_option("--iters", aa.iters);
    at->add_option("--step", aa.step);
    at->add_option("--sub-patch", aa.sub_patch);
    at->add_option("--limit", aa.limit);

    std::string pr_ckpt, pr_image, pr_ablation = "tile:a=10";
    int pr_b = 5;
    auto* pr = app.add_subcommand("predict", "majority-vote prediction for one image");
    pr->add_option("--checkpoint", pr_ckpt)->required();
    pr->add_option("--image", pr_image)->required();
    pr->add_option("--ablation", pr_ablation);
    pr->add_option("--patch-side", pr_b);

    std::string ev_which;
    bool ev_no_train = false, ev_reuse = false, ev_plots = false;
    auto* ev = app.add_subcommand("eval", "run an experiment: table1 | gridsize | shapes");
    add_common(ev, common);
    ev->add_option("which", ev_which)->required()->check(CLI::IsMember({"table1", "gridsize", "shapes"}));
    ev->add_flag("--no-train", ev_no_train, "load trained artifacts instead of training");
    ev->add_flag("--reuse", ev_reuse, "load artifacts when present, train the rest");
    ev->add_flag("--plots", ev_plots, "also write PNG plots");

    std::string rp_patterns, rp_out;
    int rp_side = 30, rp_scale = 10;
    auto* rp = app.add_subcommand("render-pattern", "visualize a pattern file");
    rp->add_option("--patterns", rp_patterns)->required();
    rp->add_option("--out", rp_out)->required();
    rp->add_option("--side", rp_side);
    rp->add_option("--scale", rp_scale);

    std::uint64_t cc_seed = 0;
    auto* cc = app.add_subcommand("calibrate-color", "write the calibration chart and fitted color models");
    add_common(cc, common);
    cc->add_option("--seed", cc_seed);

    CLI11_PARSE(app, argc, argv);

    try {
        if (*synth) {
            save_dataset(synth_dataset(synth_classes, synth_n, synth_side, synth_seed), synth_out);
            return 0;
        }
        if (*tb) {
            return train_baseline(common, base_data, base_ablation);
        }
        if (*tr) {
            return train_red(common, false);
        }
        if (*ta) {
            return train_red(common, true);
        }
        if (*at) {
            return attack_cmd(common, aa);
        }
        if (*pr) {
            return predict_cmd(pr_ckpt, pr_image, pr_ablation, pr_b);
        }
        if (*ev) {
            return eval_cmd(common, ev_which, ev_no_train, ev_reuse, ev_plots);
        }
        if (*rp) {
            return render_pattern_cmd(rp_patterns, rp_out, rp_side, rp_scale);
        }
        if (*cc) {
            return calibrate_cmd(common, cc_seed);
        }
    } catch (const red::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
