// stab: command-line driver for the stability toolkit.
//
// Exit codes: 0 success, 1 replay mismatch or unexpected failure, 2 usage
// error, 3 numerical failure.

#include <chrono>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "stab/stab.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace stab;

namespace {

constexpr const char* kVersion = "1.0.0";

class ReplayMismatch : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Bookkeeping for the manifest written after a successful command.
struct Run {
    std::vector<std::string> argv;
    std::string command;
    std::string parameters;
    std::vector<std::uint64_t> seeds;
    std::map<std::string, std::string> inputs;
    std::vector<std::string> outputs;
    fs::path manifest;

    std::string input(const std::string& path) {
        if (!path.empty()) inputs[path] = io::file_digest(path);
        return path;
    }

    void write(const fs::path& path, const std::string& text) {
        if (path.has_parent_path()) fs::create_directories(path.parent_path());
        io::write_text_atomic(path, text);
        outputs.push_back(path.string());
    }
};

ZooModel load_model(Run& run, const std::string& path) {
    return ZooModel::from_checkpoint(load_checkpoint(run.input(path)));
}

Dataset load_data(Run& run, const std::string& path, std::size_t limit = 0) {
    Dataset d = load_dataset(run.input(path));
    if (limit && d.size() > limit) d.resize(limit);
    return d;
}

std::vector<std::uint64_t> seed_list(std::size_t count, std::uint64_t base) {
    std::vector<std::uint64_t> s;
    for (std::size_t i = 0; i < count; ++i) s.push_back(base + i);
    return s;
}

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

reference::Split reference_split(const std::string& kind, std::uint64_t seed) {
    if (kind == "vision") return reference::vision_data(seed);
    if (kind == "mlp" || kind == "softmax") return reference::mlp_data(seed);
    if (kind == "transformer") return reference::transformer_data(seed);
    throw InvalidInput("unknown dataset kind '" + kind + "' (vision, mlp, softmax, transformer)");
}

TrainConfig reference_config(Arch a) {
    switch (a) {
    case Arch::vision_classifier: return reference::vision_config();
    case Arch::tiny_transformer: return reference::transformer_config();
    default: return reference::mlp_config();
    }
}

std::string arch_alias(Arch a) {
    switch (a) {
    case Arch::vision_classifier: return "vision";
    case Arch::tiny_transformer: return "transformer";
    case Arch::softmax_regression: return "softmax";
    default: return "mlp";
    }
}

// ---------------------------------------------------------------------------
// CSV reading for `report`

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    bool quoted = false;
    for (char c : line) {
        if (c == '"') {
            quoted = !quoted;
        } else if (c == ',' && !quoted) {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

std::vector<std::vector<std::string>> read_csv(const std::string& text) {
    std::vector<std::vector<std::string>> rows;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) rows.push_back(split_csv_line(line));
    return rows;
}

double to_double(const std::string& s) {
    try {
        std::size_t pos = 0;
        const double v = std::stod(s, &pos);
        if (pos == s.size()) return v;
    } catch (const std::exception&) {
    }
    throw InvalidInput("report: '" + s + "' is not a number");
}

std::string quote(const std::string& s) { return '"' + s + '"'; }

// ---------------------------------------------------------------------------

int dispatch(const std::vector<std::string>& args);

struct Options {
    // shared
    std::string model, data, out, calibration;
    std::uint64_t seed = 0, data_seed = 0;
    std::size_t seeds = 3, limit = 0;
    // gen-data / train
    std::string kind = "vision", split = "train", arch;
    std::size_t n = 0;
    std::optional<std::size_t> epochs, batch;
    std::optional<double> lr;
    // fi-map
    std::string measure = "fi", target = "pixels", pgm;
    std::size_t index = 0;
    bool mean = false;
    // attack
    std::size_t k = 10;
    std::vector<std::string> measures;
    double mask_value = 0.0, fraction = 0.001;
    std::vector<double> eps{1.0};
    // sparsify
    std::vector<double> fractions{0.01, 0.02, 0.03, 0.05};
    std::vector<std::string> strategies{"fi-high", "random"};
    std::size_t calib_n = 100, gen_length = 8;
    std::string metric = "accuracy";
    // seq-fi
    std::string mode = "fixed";
    std::size_t L = 5, samples = 10, l_max = 256;
    double gamma = 0.9;
    std::vector<std::size_t> units;
    // merge
    std::string a, b, base, val_a, val_b, calib_a, calib_b, method = "average", stage = "none", out_ckpt;
    std::optional<double> protect_k;
    double merge_gamma = 1.0, ties_density = 0.2, dare_drop = 0.9;
    bool full_grid = false, unprotected = false;
    // zoo / report / replay
    std::string dir, manifest;
    std::vector<std::string> inputs;
};

// ---------------------------------------------------------------------------
// Commands

void cmd_gen_data(Options& o, Run& run) {
    require(o.split == "train" || o.split == "validation" || o.split == "test",
            "unknown split '" + o.split + "' (train, validation, test)");
    reference::Split s = reference_split(o.kind, o.seed);
    Dataset d = o.split == "train" ? s.train : o.split == "validation" ? s.validation : s.test;
    if (o.n && d.size() > o.n) d.resize(o.n);
    run.seeds = {o.seed};
    run.write(o.out, dataset_to_text(d));
    std::cout << "wrote " << d.size() << " samples to " << o.out << "\n";
}

void cmd_train(Options& o, Run& run) {
    const Arch arch = parse_arch(o.arch);
    Dataset train = o.data.empty() ? reference_split(arch_alias(arch), o.data_seed).train : load_data(run, o.data);
    TrainConfig cfg = reference_config(arch);
    if (arch == Arch::softmax_regression) cfg.class_count = 4;
    if (o.epochs) cfg.epochs = *o.epochs;
    if (o.batch) cfg.batch = *o.batch;
    if (o.lr) cfg.learning_rate = *o.lr;
    run.seeds = {o.seed, o.data_seed};
    const ZooModel m = train_toy(arch, train, cfg, derive_seed(o.seed, 4));
    run.write(o.out, checkpoint_to_text(m.checkpoint));
    std::cout << "trained " << arch_name(arch) << " (" << m.parameter_count() << " parameters), train accuracy "
              << accuracy(m, train) << "\n";
}

void cmd_zoo(Options& o, Run& run) {
    const reference::TwoTaskZoo z = reference::two_task(o.seed);
    run.seeds = {o.seed};
    const fs::path d = o.dir;
    run.write(d / "base.ckpt", checkpoint_to_text(z.base.checkpoint));
    run.write(d / "a.ckpt", checkpoint_to_text(z.a.checkpoint));
    run.write(d / "b.ckpt", checkpoint_to_text(z.b.checkpoint));
    run.write(d / "val_a.json", dataset_to_text(z.data_a.validation));
    run.write(d / "val_b.json", dataset_to_text(z.data_b.validation));
    run.write(d / "test_a.json", dataset_to_text(z.data_a.test));
    run.write(d / "test_b.json", dataset_to_text(z.data_b.test));
    run.write(d / "calib_a.json", dataset_to_text(z.calibration_a));
    run.write(d / "calib_b.json", dataset_to_text(z.calibration_b));
    std::cout << "two-task zoo in " << d.string() << ": A acc " << accuracy(z.a, z.data_a.test) << ", B acc "
              << accuracy(z.b, z.data_b.test) << "\n";
}

void cmd_evaluate(Options& o, Run& run) {
    const ZooModel m = load_model(run, o.model);
    const Dataset d = load_data(run, o.data, o.limit);
    const EvalReport r = evaluate_accuracy(m, d);
    run.write(o.out, csv_header() + csv_row(r));
    std::cout << "accuracy " << r.value << " on " << r.samples << " samples\n";
}

void cmd_fi_map(Options& o, Run& run) {
    const ZooModel m = load_model(run, o.model);
    const Measure measure = parse_measure(o.measure);
    const Family family = parse_family(o.target);
    StabilityMap map;
    if (o.mean) {
        const Dataset d = load_data(run, o.data, o.limit);
        map = stability_map_mean(m, d, family, measure);
        map.input_id = fs::path(o.data).filename().string() + "[mean]";
    } else {
        const Dataset d = load_data(run, o.data);
        require(o.index < d.size(), "--index is outside the dataset");
        map = stability_map(m, d[o.index], family, measure);
        map.input_id = fs::path(o.data).filename().string() + "[" + std::to_string(o.index) + "]";
    }
    map.model_id = io::file_digest(o.model);
    run.write(o.out, map_to_json(map).dump(1) + "\n");
    if (!o.pgm.empty()) run.write(o.pgm, map_to_pgm(map));
    std::cout << "scored " << map.size() << " units\n";
}

void cmd_attack_pixels(Options& o, Run& run) {
    const ZooModel m = load_model(run, o.model);
    const Dataset d = load_data(run, o.data, o.limit);
    const auto measures = o.measures.empty() ? std::vector<std::string>{"fi", "jacobian", "saliency", "random"}
                                             : o.measures;
    std::string csv = csv_header();
    csv += csv_row(evaluate_accuracy(m, d, "original"));
    run.seeds = seed_list(o.seeds, o.seed);
    for (const auto& name : measures) {
        const RankSource src = parse_rank_source(name);
        EvalReport r;
        if (src) {
            r = pixel_attack(m, d, src, o.k, 0, o.mask_value);
        } else {
            std::vector<EvalReport> runs;
            for (auto s : run.seeds) runs.push_back(pixel_attack(m, d, src, o.k, s, o.mask_value));
            r = combine_reports(runs);
        }
        csv += csv_row(r);
        std::cout << r.condition << ": " << r.value << (src ? "" : " +- " + fmt(r.std)) << "\n";
    }
    run.write(o.out, csv);
}

void cmd_attack_embed(Options& o, Run& run) {
    const ZooModel m = load_model(run, o.model);
    const Dataset d = load_data(run, o.data, o.limit);
    const auto measures = o.measures.empty() ? std::vector<std::string>{"fi", "random"} : o.measures;
    std::string csv = csv_header();
    csv += csv_row(evaluate_accuracy(m, d, "original"));
    run.seeds = seed_list(o.seeds, o.seed);
    for (double eps : o.eps) {
        for (const auto& name : measures) {
            const RankSource src = parse_rank_source(name);
            std::vector<EvalReport> runs;
            std::size_t degenerate = 0;
            for (auto s : src ? std::vector<std::uint64_t>{0} : run.seeds) {
                std::size_t deg = 0;
                runs.push_back(embedding_attack(m, d, src, o.fraction, eps, s, &deg));
                degenerate = std::max(degenerate, deg);
            }
            const EvalReport r = runs.size() == 1 ? runs.front() : combine_reports(runs);
            csv += csv_row(r);
            std::cout << r.condition << ": " << r.value << "\n";
            if (degenerate) {
                const std::string msg = "warning: " + std::to_string(degenerate) +
                                        " degenerate samples left unperturbed (" + r.condition + ")";
                csv += quote(msg) + ",degenerate," + std::to_string(degenerate) + ",0,\n";
                std::cerr << msg << "\n";
            }
        }
    }
    run.write(o.out, csv);
}

void cmd_sparsify(Options& o, Run& run) {
    const ZooModel m = load_model(run, o.model);
    const Dataset d = load_data(run, o.data, o.limit);
    Dataset calib;
    if (!o.calibration.empty()) {
        calib = load_data(run, o.calibration, o.calib_n);
    } else {
        calib.assign(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(std::min(o.calib_n, d.size())));
    }
    const bool rouge = o.metric == "rouge1";
    require(rouge || o.metric == "accuracy", "unknown metric '" + o.metric + "' (accuracy, rouge1)");
    require(!rouge || m.arch == Arch::tiny_transformer, "rouge1 needs a tiny-transformer");
    std::vector<std::vector<std::size_t>> refs;
    if (rouge) refs = generate_continuations(m, d, o.gen_length, o.seed);
    auto evaluate = [&](const ZooModel& sm, const std::string& cond) {
        return rouge ? evaluate_rouge(sm, d, refs, o.gen_length, o.seed, cond) : evaluate_accuracy(sm, d, cond);
    };
    std::optional<StabilityMap> map;
    run.seeds = seed_list(o.seeds, o.seed);
    std::string csv = csv_header() + csv_row(evaluate(m, "original"));
    for (const auto& sname : o.strategies) {
        const SparsifyStrategy strat = parse_sparsify_strategy(sname);
        if (strat == SparsifyStrategy::fi_high && !map) map = reference::parameter_fi_map(m, calib);
        for (double f : o.fractions) {
            std::ostringstream cond;
            cond << "sparsify strategy=" << sname << " fraction=" << f;
            std::vector<EvalReport> runs;
            for (auto s : strat == SparsifyStrategy::random ? run.seeds : std::vector<std::uint64_t>{0}) {
                ZooModel sm = m;
                sm.checkpoint = sparsify(m.checkpoint, f, strat, map ? &*map : nullptr, s);
                runs.push_back(evaluate(sm, cond.str()));
                if (strat == SparsifyStrategy::random) runs.back().seeds = {s};
            }
            const EvalReport r = runs.size() == 1 ? runs.front() : combine_reports(runs);
            csv += csv_row(r);
            std::cout << r.condition << ": " << r.value << "\n";
        }
    }
    run.write(o.out, csv);
}

void cmd_seq_fi(Options& o, Run& run) {
    const ZooModel m = load_model(run, o.model);
    const Dataset prompts = load_data(run, o.data, o.limit);
    SeqFIParams p;
    require(o.mode == "fixed" || o.mode == "discounted", "unknown mode '" + o.mode + "' (fixed, discounted)");
    p.mode = o.mode == "fixed" ? SeqMode::fixed : SeqMode::discounted;
    p.L = o.L;
    p.gamma = o.gamma;
    p.samples = o.samples;
    p.l_max = o.l_max;
    p.seed = o.seed;
    run.seeds = {o.seed};
    std::vector<std::size_t> units = o.units;
    if (units.empty()) units = family_units(m, Family::all_embed_dims);
    json out;
    out["mode"] = seq_mode_name(p.mode);
    out["samples"] = p.samples;
    out["prompts"] = prompts.size();
    json rows = json::array();
    for (std::size_t u : units) {
        std::vector<SeqFIEstimate> per;
        const double v = fi_dataset_mean(m, prompts, PerturbationTarget::embedding_dim(u), p, &per);
        json row{{"unit", u}, {"value", v}};
        json ests = json::array();
        for (const auto& e : per) ests.push_back(seq_estimate_to_json(e));
        row["per_prompt"] = std::move(ests);
        rows.push_back(std::move(row));
        std::cout << "embedding dim " << u << ": " << v << "\n";
    }
    out["units"] = std::move(rows);
    run.write(o.out, out.dump(1) + "\n");
}

void cmd_merge(Options& o, Run& run) {
    const ZooModel a = load_model(run, o.a);
    const ZooModel b = load_model(run, o.b);
    std::optional<ZooModel> base;
    if (!o.base.empty()) base = load_model(run, o.base);
    const Dataset va = load_data(run, o.val_a), vb = load_data(run, o.val_b);

    MergeConfig cfg;
    cfg.method = parse_merge_method(o.method);
    cfg.gamma = o.merge_gamma;
    cfg.ties_density = o.ties_density;
    cfg.dare_drop = o.dare_drop;
    cfg.stage = parse_protect_stage(o.stage);
    cfg.seed = o.seed;
    cfg.k = o.protect_k;
    std::vector<MergeConfig> grid;
    if (o.full_grid) {
        MergeGrid g = MergeGrid::standard(cfg);
        if (o.unprotected || (merge_is_ties(cfg.method) && cfg.stage == ProtectStage::none)) g.ks.clear();
        if (g.ks.empty()) g.base_config.k.reset();
        grid = g.expand();
    } else {
        grid = {cfg};
    }
    const bool protect = std::any_of(grid.begin(), grid.end(), [](const MergeConfig& c) { return c.k.has_value(); });
    std::optional<StabilityMap> ma, mb;
    if (protect) {
        if (o.calib_a.empty() || o.calib_b.empty())
            throw InvalidInput("protection needs --calib-a and --calib-b");
        ma = reference::parameter_fi_map(a, load_data(run, o.calib_a));
        mb = reference::parameter_fi_map(b, load_data(run, o.calib_b));
    }
    MergeInputs in{&a.checkpoint, &b.checkpoint, base ? &base->checkpoint : nullptr, ma ? &*ma : nullptr,
                   mb ? &*mb : nullptr};
    run.seeds = {o.seed};
    const SearchResult res = hyper_search(grid, in, a, va, vb);
    run.write(o.out, merge_table_csv(res.table));
    if (!o.out_ckpt.empty()) run.write(o.out_ckpt, checkpoint_to_text(run_merge(res.best.config, in)));
    std::cout << res.table.size() << " configurations; best " << merge_table_row(res.best);
    for (const auto& c : grid)
        if (c.stage == ProtectStage::two && ma) {
            TiesStats st;
            run_merge(c, in, &st);
            if (st.overlap)
                std::cerr << "warning: " << st.overlap << " entries protected in both models resolved to A (k="
                          << *c.k << ")\n";
            break;
        }
}

void cmd_report(Options& o, Run& run) {
    require(!o.inputs.empty(), "report needs --inputs");
    std::vector<std::vector<std::string>> eval_rows, merge_rows;
    for (const auto& path : o.inputs) {
        const auto rows = read_csv(io::read_text(run.input(path)));
        require(!rows.empty(), "report: " + path + " is empty");
        const std::string head = rows.front().front();
        auto& sink = head == "condition" ? eval_rows : head == "method" ? merge_rows : eval_rows;
        require(head == "condition" || head == "method", "report: " + path + " is not a stab CSV");
        sink.insert(sink.end(), rows.begin() + 1, rows.end());
    }
    std::string out;
    if (!eval_rows.empty()) {
        // Rows sharing a condition and metric are pooled: mean and sample std across inputs.
        std::vector<std::pair<std::string, std::string>> order;
        std::map<std::pair<std::string, std::string>, std::vector<double>> groups;
        for (const auto& r : eval_rows) {
            require(r.size() >= 3, "report: malformed evaluation row");
            if (r[1] == "degenerate") continue;
            const auto key = std::make_pair(r[0], r[1]);
            if (!groups.count(key)) order.push_back(key);
            groups[key].push_back(to_double(r[2]));
        }
        out += "condition,metric,mean,std,runs\n";
        for (const auto& key : order) {
            const auto& v = groups[key];
            double mean = 0.0;
            for (double x : v) mean += x / static_cast<double>(v.size());
            double ss = 0.0;
            for (double x : v) ss += (x - mean) * (x - mean);
            const double sd = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
            out += quote(key.first) + "," + key.second + "," + fmt(mean) + "," + fmt(sd) + "," +
                   std::to_string(v.size()) + "\n";
        }
    }
    if (!merge_rows.empty()) {
        // Best row per (method, protection), like a comparison table.
        std::vector<std::pair<std::string, std::string>> order;
        std::map<std::pair<std::string, std::string>, std::vector<std::string>> best;
        for (const auto& r : merge_rows) {
            require(r.size() == 7, "report: malformed merge row");
            const auto key = std::make_pair(r[0], r[1]);
            if (!best.count(key)) {
                order.push_back(key);
                best[key] = r;
            } else if (to_double(r[6]) > to_double(best[key][6])) {
                best[key] = r;
            }
        }
        if (!out.empty()) out += "\n";
        out += merge_table_header();
        for (const auto& key : order) {
            const auto& r = best[key];
            for (std::size_t i = 0; i < r.size(); ++i) out += (i ? "," : "") + r[i];
            out += "\n";
        }
    }
    run.write(o.out, out);
    std::cout << out;
}

void cmd_replay(Options& o) {
    const json m = json::parse(io::read_text(o.manifest));
    const std::string cwd = m.value("cwd", "");
    if (!cwd.empty() && fs::exists(cwd)) fs::current_path(cwd);
    for (const auto& [path, dig] : m.at("inputs").items())
        if (io::file_digest(path) != dig.get<std::string>())
            throw InvalidInput("replay: input " + path + " changed since the manifest was written");
    const auto argv = m.at("argv").get<std::vector<std::string>>();
    const int code = dispatch(argv);
    if (code != 0) throw ReplayMismatch("replay: command exited with code " + std::to_string(code));
    std::size_t checked = 0;
    for (const auto& [path, dig] : m.at("outputs").items()) {
        if (io::file_digest(path) != dig.get<std::string>())
            throw ReplayMismatch("replay: output " + path + " differs from the manifest");
        ++checked;
    }
    std::cout << "replay reproduced " << checked << " outputs bit-identically\n";
}

void write_manifest(Run& run, double seconds) {
    if (run.manifest.empty()) return;
    json j;
    j["tool"] = "stab";
    j["version"] = kVersion;
    j["command"] = run.command;
    j["argv"] = run.argv;
    j["parameters"] = run.parameters;
    j["seeds"] = run.seeds;
    j["inputs"] = run.inputs;
    json outs = json::object();
    for (const auto& p : run.outputs) outs[p] = io::file_digest(p);
    j["outputs"] = outs;
    j["cwd"] = fs::current_path().string();
    j["wall_clock_seconds"] = seconds;
    j["finished_at"] = static_cast<std::int64_t>(std::time(nullptr));
    io::write_text_atomic(run.manifest, j.dump(1) + "\n");
}

int exit_code(const Error& e) {
    switch (e.kind()) {
    case ErrorKind::invalid_input: return 2;
    case ErrorKind::out_of_range:
    case ErrorKind::training_failure:
    case ErrorKind::degenerate_attack: return 3;
    }
    return 1;
}

int dispatch(const std::vector<std::string>& args) {
    Options o;
    Run run;
    run.argv = args;
    CLI::App app{"Stability and sensitivity analysis toolkit"};
    app.set_version_flag("--version", kVersion);
    app.set_config("--config", "", "TOML/INI file with option defaults; flags override it");
    app.require_subcommand(1);

    auto out_opt = [&](CLI::App* c, bool required = true) {
        auto* opt = c->add_option("--out", o.out, "Output file");
        if (required) opt->required();
    };
    auto model_data = [&](CLI::App* c) {
        c->add_option("--model", o.model, "Checkpoint file")->required();
        c->add_option("--data", o.data, "Dataset file")->required();
        c->add_option("--limit", o.limit, "Use only the first N samples (0: all)");
    };
    auto seeds_opt = [&](CLI::App* c) {
        c->add_option("--seed", o.seed, "Base seed");
        c->add_option("--seeds", o.seeds, "Number of seeds for randomized conditions (base, base+1, ...)")
            ->check(CLI::PositiveNumber);
    };

    auto* gen = app.add_subcommand("gen-data", "Write a reference dataset split");
    gen->add_option("--kind", o.kind, "vision, mlp, softmax or transformer");
    gen->add_option("--split", o.split, "train, validation or test");
    gen->add_option("--n", o.n, "Keep only the first N samples");
    gen->add_option("--seed", o.seed);
    out_opt(gen);

    auto* train = app.add_subcommand("train", "Train a zoo model");
    train->add_option("--arch", o.arch, "softmax, mlp, vision or transformer")->required();
    train->add_option("--data", o.data, "Training set (default: the reference split for the arch)");
    train->add_option("--seed", o.seed, "Initialization and shuffling seed");
    train->add_option("--data-seed", o.data_seed, "Seed of the reference training split");
    train->add_option("--epochs", o.epochs);
    train->add_option("--batch", o.batch);
    train->add_option("--lr", o.lr);
    out_opt(train);

    auto* zoo = app.add_subcommand("zoo", "Build the two-task merging zoo");
    zoo->add_option("--seed", o.seed);
    zoo->add_option("--dir", o.dir, "Output directory")->required();

    auto* eval = app.add_subcommand("evaluate", "Accuracy of a model on a dataset");
    model_data(eval);
    out_opt(eval);

    auto* fimap = app.add_subcommand("fi-map", "Stability map of one input or a dataset mean");
    model_data(fimap);
    fimap->add_option("--measure", o.measure, "fi, jacobian, snip or saliency");
    fimap->add_option("--target", o.target, "pixels, params, embed-dims or input-dims");
    fimap->add_option("--index", o.index, "Sample index");
    fimap->add_flag("--mean", o.mean, "Average the map over the dataset");
    fimap->add_option("--emit-pgm", o.pgm, "Also write a P2 image of a pixel map");
    out_opt(fimap);

    auto* attack = app.add_subcommand("attack", "Measure-guided attacks");
    attack->require_subcommand(1);
    auto* pixels = attack->add_subcommand("pixels", "Mask the top-k pixels of every image");
    model_data(pixels);
    seeds_opt(pixels);
    pixels->add_option("--k", o.k, "Pixels to mask");
    pixels->add_option("--measures", o.measures, "Rankings: fi, jacobian, snip, saliency, random")->delimiter(',');
    pixels->add_option("--mask-value", o.mask_value);
    out_opt(pixels);
    auto* embed = attack->add_subcommand("embed", "Perturb the top embedding dimensions along the gradient");
    model_data(embed);
    seeds_opt(embed);
    embed->add_option("--fraction", o.fraction, "Fraction of embedding dimensions");
    embed->add_option("--eps", o.eps, "Step sizes (comma separated sweep)")->delimiter(',');
    embed->add_option("--measures", o.measures, "Rankings: fi, jacobian, snip, saliency, random")->delimiter(',');
    out_opt(embed);

    auto* sp = app.add_subcommand("sparsify", "Zero FI-ranked or random parameters");
    model_data(sp);
    seeds_opt(sp);
    sp->add_option("--fractions", o.fractions)->delimiter(',');
    sp->add_option("--strategies", o.strategies, "fi-high, random")->delimiter(',');
    sp->add_option("--calibration", o.calibration, "Dataset for the FI map (default: head of --data)");
    sp->add_option("--calib-n", o.calib_n, "Calibration samples");
    sp->add_option("--metric", o.metric, "accuracy or rouge1");
    sp->add_option("--gen-length", o.gen_length, "Generated tokens for rouge1");
    out_opt(sp);

    auto* seq = app.add_subcommand("seq-fi", "Sequence FI of embedding dimensions over prompts");
    model_data(seq);
    seq->add_option("--mode", o.mode, "fixed or discounted");
    seq->add_option("--L", o.L, "Fixed horizon");
    seq->add_option("--gamma", o.gamma, "Discount factor");
    seq->add_option("--samples", o.samples, "Monte-Carlo continuations per step");
    seq->add_option("--l-max", o.l_max, "Discounted truncation cap");
    seq->add_option("--units", o.units, "Embedding dimensions (default: all)")->delimiter(',');
    seq->add_option("--seed", o.seed);
    out_opt(seq);

    auto* merge = app.add_subcommand("merge", "Merge two fine-tuned models, optionally with FI protection");
    merge->add_option("--a", o.a)->required();
    merge->add_option("--b", o.b)->required();
    merge->add_option("--base", o.base);
    merge->add_option("--val-a", o.val_a)->required();
    merge->add_option("--val-b", o.val_b)->required();
    merge->add_option("--calib-a", o.calib_a);
    merge->add_option("--calib-b", o.calib_b);
    merge->add_option("--method", o.method, "average, task, ties, dare-task, dare-ties");
    merge->add_option("--k", o.protect_k, "Protection ratio");
    merge->add_option("--gamma", o.merge_gamma);
    merge->add_option("--ties-density", o.ties_density);
    merge->add_option("--dare-drop", o.dare_drop);
    merge->add_option("--protect-stage", o.stage, "none, I or II (TIES)");
    merge->add_flag("--grid-from-paper", o.full_grid, "Search k in 1..10% and gamma in {.3,.4,.5,.6,.9,1}");
    merge->add_flag("--unprotected", o.unprotected, "Search gamma only");
    merge->add_option("--seed", o.seed);
    merge->add_option("--out-ckpt", o.out_ckpt, "Write the best merged checkpoint");
    out_opt(merge);

    auto* report = app.add_subcommand("report", "Pool result CSVs into comparison tables");
    report->add_option("--inputs", o.inputs)->required()->delimiter(',');
    out_opt(report);

    auto* replay = app.add_subcommand("replay", "Re-run a manifest and verify its outputs");
    replay->add_option("--manifest", o.manifest)->required();

    std::vector<const char*> cargv{"stab"};
    for (const auto& a : args) cargv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(cargv.size()), cargv.data());
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    const auto start = std::chrono::steady_clock::now();
    try {
        CLI::App* sub = app.get_subcommands().front();
        if (sub == attack) sub = attack->get_subcommands().front();
        run.command = sub == pixels ? "attack pixels" : sub == embed ? "attack embed" : sub->get_name();
        run.parameters = sub->config_to_str(true, false);
        if (!o.out.empty()) run.manifest = o.out + ".manifest.json";
        if (sub == gen) cmd_gen_data(o, run);
        else if (sub == train) cmd_train(o, run);
        else if (sub == zoo) {
            run.manifest = (fs::path(o.dir) / "manifest.json").string();
            cmd_zoo(o, run);
        } else if (sub == eval) cmd_evaluate(o, run);
        else if (sub == fimap) cmd_fi_map(o, run);
        else if (sub == pixels) cmd_attack_pixels(o, run);
        else if (sub == embed) cmd_attack_embed(o, run);
        else if (sub == sp) cmd_sparsify(o, run);
        else if (sub == seq) cmd_seq_fi(o, run);
        else if (sub == merge) cmd_merge(o, run);
        else if (sub == report) cmd_report(o, run);
        else if (sub == replay) {
            cmd_replay(o);
            return 0;
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        write_manifest(run, secs);
        return 0;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_code(e);
    } catch (const json::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const ReplayMismatch& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

} // namespace

int main(int argc, char** argv) { return dispatch(std::vector<std::string>(argv + 1, argv + argc)); }
