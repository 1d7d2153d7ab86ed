// afd_cli: corpus generation, two-phase training, evaluation, ablation grids
// and mask/attention export.
//
// Exit codes: 0 ok, 2 usage or configuration error, 3 I/O failure,
// 4 numerical abort.

#include "afd/afd.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

namespace fs = std::filesystem;
using namespace afd;

namespace {

enum Exit { kOk = 0, kUsage = 2, kIo = 3, kNumeric = 4 };

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Options shared by every command that resolves a RunConfig.
struct ConfigOptions {
    std::string file;
    std::vector<std::string> sets;
};

void add_config_options(CLI::App* cmd, ConfigOptions& opts) {
    cmd->add_option("--config", opts.file, "JSON file of dotted config keys");
    cmd->add_option("--set", opts.sets, "Override one key, e.g. --set train.gamma=0.5")->take_all();
}

nlohmann::json read_json_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read " + path.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw IoError(path.string() + ": " + e.what());
    }
}

// defaults < config file < --set < dedicated flags (applied by the caller).
void apply_config_options(RunConfig& rc, const ConfigOptions& opts) {
    if (!opts.file.empty()) apply_flat_json(rc, read_json_file(opts.file));
    for (const auto& kv : opts.sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos || eq == 0) throw UsageError("--set expects key=value, got '" + kv + "'");
        const auto key = kv.substr(0, eq), text = kv.substr(eq + 1);
        auto value = nlohmann::json::parse(text, nullptr, false);
        if (value.is_discarded()) value = text;
        apply_flat_json(rc, nlohmann::json{{key, value}});
    }
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
    if (!out) throw IoError("failed writing " + path.string());
}

void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

void echo_config(const fs::path& dir, const RunConfig& rc) {
    write_text(dir / "config.json", to_flat_json(rc).dump(1) + "\n");
}

Corpus load_corpus(const std::string& dir) {
    if (dir.empty()) throw UsageError("--data is required");
    return read_corpus(dir);
}

// Model dimensions always follow the corpus being trained on.
void adopt_corpus(RunConfig& rc, const Corpus& corpus) {
    rc.data.seed = corpus.seed;
    rc.data.size = corpus.height;
    rc.data.channels = corpus.channels;
    rc.data.domains = corpus.domains;
    rc.train.model.height = corpus.height;
    rc.train.model.width = corpus.width;
    rc.train.model.channels = corpus.channels;
}

std::string fmt(double v) { return nlohmann::json(v).dump(); }

std::string fmt(const std::optional<double>& v) { return v ? fmt(*v) : "null"; }

// --- gen ---------------------------------------------------------------------

struct GenArgs {
    ConfigOptions cfg;
    std::string out;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> size, count, domains;
};

int cmd_gen(const GenArgs& a) {
    RunConfig rc;
    apply_config_options(rc, a.cfg);
    if (a.seed) rc.data.seed = *a.seed;
    if (a.size) rc.data.size = *a.size;
    if (a.count) rc.data.count = *a.count;
    if (a.domains) rc.data.domains = *a.domains;
    if (rc.data.size == 0 || rc.data.channels == 0) throw UsageError("--size and channels must be positive");
    if (rc.data.domains == 0 || rc.data.domains > 3) throw UsageError("--domains must lie in [1, 3]");

    const auto corpus = generate_corpus(rc.data);
    const fs::path out(a.out);
    if (fs::exists(out))
        for (const auto& e : fs::directory_iterator(out))
            if (e.path().extension() == ".afd") fs::remove(e.path());
    write_corpus(corpus, out);
    rc.train.model.height = rc.train.model.width = rc.data.size;
    rc.train.model.channels = rc.data.channels;
    echo_config(out, rc);

    std::map<std::string, std::map<std::string, std::size_t>> table;
    for (const auto& s : corpus.samples)
        ++table[to_string(s.split)][s.label == 0 ? "real" : "domain" + std::to_string(s.domain)];
    std::cout << "wrote " << corpus.samples.size() << " images to " << out.string() << "\n";
    for (const auto* split : {"train", "val", "test"}) {
        std::cout << split;
        for (const auto& [k, v] : table[split]) std::cout << " " << k << "=" << v;
        std::cout << "\n";
    }
    return kOk;
}

// --- train -------------------------------------------------------------------

struct TrainArgs {
    ConfigOptions cfg;
    std::string data, out, resume, phase = "adad";
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> epochs, iters, batch;
    std::optional<double> lr, gamma;
    std::optional<std::string> mask_mode, mask_init, fusion;
    bool spatial_only = false;
};

void apply_train_flags(RunConfig& rc, const TrainArgs& a) {
    auto& t = rc.train;
    if (a.seed) t.seed = *a.seed;
    if (a.epochs) t.adad_epochs = *a.epochs;
    if (a.iters) t.adat_iters = *a.iters;
    if (a.batch) t.batch = *a.batch;
    if (a.lr) t.lr0 = *a.lr;
    if (a.gamma) t.gamma = *a.gamma;
    if (a.mask_mode) t.model.mask_mode = parse_mask_mode(*a.mask_mode);
    if (a.mask_init) t.model.mask_init = parse_mask_init(*a.mask_init);
    if (a.fusion) t.model.fusion = parse_fusion_scheme(*a.fusion);
    if (a.spatial_only) t.model.frequency_branch = false;
}

int cmd_train(const TrainArgs& a) {
    const Phase phase = parse_phase(a.phase);
    if (phase == Phase::adat && a.resume.empty()) throw UsageError("--phase adat needs --resume <adad checkpoint>");
    if (phase == Phase::adad && !a.resume.empty()) throw UsageError("--resume is only meaningful with --phase adat");

    const auto corpus = load_corpus(a.data);
    std::optional<Checkpoint> base;
    RunConfig rc;
    if (phase == Phase::adat) {
        base = load_checkpoint(a.resume);
        if (base->phase != Phase::adad) throw UsageError(a.resume + " is an adat checkpoint; --resume needs phase adad");
        rc = base->config;
    }
    apply_config_options(rc, a.cfg);
    apply_train_flags(rc, a);
    if (base) {
        rc.train.model = base->config.train.model;  // architecture is fixed by the checkpoint
        if (corpus.height != rc.train.model.height || corpus.width != rc.train.model.width ||
            corpus.channels != rc.train.model.channels)
            throw UsageError("corpus dimensions do not match the checkpoint's model");
    }
    adopt_corpus(rc, corpus);
    rc.train.validate();

    const fs::path out(a.out);
    ensure_dir(out);
    echo_config(out, rc);
    std::ofstream log(out / "train_log.jsonl", std::ios::trunc);
    if (!log) throw IoError("cannot write " + (out / "train_log.jsonl").string());
    TrainHooks hooks;
    hooks.log = &log;
    const auto ckpt = phase == Phase::adad ? train_adad(rc, corpus, hooks) : train_adat(*base, corpus, hooks, rc);
    save_checkpoint(ckpt, out / "checkpoint.afdc");
    std::cout << "phase " << to_string(ckpt.phase) << " step " << ckpt.step << " checkpoint "
              << (out / "checkpoint.afdc").string() << "\n";
    return kOk;
}

// --- eval --------------------------------------------------------------------

struct EvalArgs {
    std::string checkpoint, data, split = "test", out;
    bool per_domain = false;
};

int cmd_eval(const EvalArgs& a) {
    const auto split = parse_split(a.split);
    const auto ckpt = load_checkpoint(a.checkpoint);
    const auto corpus = load_corpus(a.data);
    const auto& m = ckpt.config.train.model;
    if (corpus.height != m.height || corpus.width != m.width || corpus.channels != m.channels)
        throw UsageError("corpus dimensions do not match the checkpoint's model");
    const auto report = evaluate(ckpt, corpus, split);

    std::cout << "split " << a.split << " acc " << fmt(report.whole.acc) << " auc " << fmt(report.whole.auc) << "\n";
    if (a.per_domain)
        for (const auto& row : report.per_domain)
            std::cout << "domain " << row.domain << " acc " << fmt(row.metrics.acc) << " auc " << fmt(row.metrics.auc)
                      << "\n";

    fs::path out = a.out.empty() ? fs::path(a.checkpoint).parent_path() : fs::path(a.out);
    if (out.empty()) out = ".";
    ensure_dir(out);
    auto j = to_json(report);
    j["split"] = a.split;
    j["checkpoint"] = a.checkpoint;
    write_text(out / "report.json", j.dump(1) + "\n");
    echo_config(out, ckpt.config);
    return kOk;
}

// --- ablate ------------------------------------------------------------------

struct AblateArgs {
    ConfigOptions cfg;
    std::string grid, data, out;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> epochs;
};

std::string slug(const std::string& label) {
    std::string s;
    for (char c : label) s += std::isalnum(static_cast<unsigned char>(c)) ? static_cast<char>(std::tolower(c)) : '_';
    return s;
}

int cmd_ablate(const AblateArgs& a) {
    if (a.grid != "tab3" && a.grid != "tab4") throw UsageError("--grid must be tab3 or tab4");
    const auto corpus = load_corpus(a.data);
    RunConfig base;
    apply_config_options(base, a.cfg);
    if (a.seed) base.train.seed = *a.seed;
    if (a.epochs) base.train.adad_epochs = *a.epochs;
    adopt_corpus(base, corpus);
    base.train.validate();

    const fs::path out(a.out);
    ensure_dir(out);
    echo_config(out, base);
    const auto rows = a.grid == "tab3" ? tab3_grid(base) : tab4_grid(base);
    std::string csv = "config,acc,auc\n";
    std::size_t ok = 0;
    for (const auto& row : rows) {
        try {
            std::ofstream log(out / (slug(row.label) + ".jsonl"), std::ios::trunc);
            TrainHooks hooks;
            hooks.log = &log;
            const auto ckpt = train_adad(row.config, corpus, hooks);
            const auto report = evaluate(ckpt, corpus, Split::test);
            csv += row.label + "," + fmt(report.whole.acc) + "," + fmt(report.whole.auc) + "\n";
            std::cout << row.label << " acc " << fmt(report.whole.acc) << " auc " << fmt(report.whole.auc) << std::endl;
            ++ok;
        } catch (const std::exception& e) {
            csv += row.label + ",FAILED,FAILED\n";
            std::cerr << row.label << " FAILED: " << e.what() << "\n";
        }
    }
    write_text(out / (a.grid + ".csv"), csv);
    return ok > 0 ? kOk : kNumeric;
}

// --- export ------------------------------------------------------------------

struct ExportArgs {
    std::string checkpoint, out;
    bool masks = false, attention = false;
};

int cmd_export(const ExportArgs& a) {
    const auto ckpt = load_checkpoint(a.checkpoint);
    const auto model = model_from_checkpoint(ckpt);
    if (!model.has_frequency_branch()) throw UsageError("checkpoint has no frequency branch to export");
    const bool both = !a.masks && !a.attention;
    const fs::path out(a.out);
    ensure_dir(out);
    echo_config(out, ckpt.config);
    if (a.masks || both) {
        const auto files = export_masks(model.mask_bank(), out);
        std::cout << "wrote " << files.size() << " masks to " << out.string() << "\n";
    }
    if (a.attention || both) {
        const auto r = model.routing();
        std::string text;
        for (std::size_t i = 0; i < r.dim(0); ++i) {
            for (std::size_t j = 0; j < r.dim(1); ++j) text += (j ? " " : "") + fmt(r.at(i * r.dim(1) + j));
            text += "\n";
        }
        write_text(out / "attention.txt", text);
        std::cout << "wrote " << (out / "attention.txt").string() << "\n";
    }
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Adaptive frequency forgery detector"};
    app.require_subcommand(1);

    GenArgs gen;
    auto* g = app.add_subcommand("gen", "Generate a synthetic corpus");
    add_config_options(g, gen.cfg);
    g->add_option("--out", gen.out, "Corpus directory")->required();
    g->add_option("--seed", gen.seed);
    g->add_option("--size", gen.size);
    g->add_option("--count", gen.count, "Pristine source images");
    g->add_option("--domains", gen.domains);

    TrainArgs train;
    auto* t = app.add_subcommand("train", "Train a detector (adad) or fine-tune transforms (adat)");
    add_config_options(t, train.cfg);
    t->add_option("--data", train.data, "Corpus directory")->required();
    t->add_option("--out", train.out, "Output directory")->required();
    t->add_option("--phase", train.phase)->check(CLI::IsMember({"adad", "adat"}));
    t->add_option("--resume", train.resume, "adad checkpoint to fine-tune");
    t->add_option("--seed", train.seed);
    t->add_option("--epochs", train.epochs);
    t->add_option("--iters", train.iters);
    t->add_option("--batch", train.batch);
    t->add_option("--lr", train.lr);
    t->add_option("--gamma", train.gamma);
    t->add_option("--mask-mode", train.mask_mode);
    t->add_option("--mask-init", train.mask_init);
    t->add_option("--fusion", train.fusion);
    t->add_flag("--spatial-only", train.spatial_only, "Drop the frequency branch");

    EvalArgs ev;
    auto* e = app.add_subcommand("eval", "Evaluate a checkpoint");
    e->add_option("--checkpoint", ev.checkpoint)->required();
    e->add_option("--data", ev.data)->required();
    e->add_option("--split", ev.split)->check(CLI::IsMember({"train", "val", "test"}));
    e->add_option("--out", ev.out, "Directory for report.json (default: next to the checkpoint)");
    e->add_flag("--per-domain", ev.per_domain);

    AblateArgs ab;
    auto* b = app.add_subcommand("ablate", "Run a decomposition (tab3) or fusion (tab4) ablation grid");
    add_config_options(b, ab.cfg);
    b->add_option("--grid", ab.grid)->required();
    b->add_option("--data", ab.data)->required();
    b->add_option("--out", ab.out)->required();
    b->add_option("--seed", ab.seed);
    b->add_option("--epochs", ab.epochs);

    ExportArgs ex;
    auto* x = app.add_subcommand("export", "Export masks as PGM images and the attention matrix as text");
    x->add_option("--checkpoint", ex.checkpoint)->required();
    x->add_option("--out", ex.out)->required();
    x->add_flag("--masks", ex.masks);
    x->add_flag("--attention", ex.attention);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        const int code = app.exit(err);
        return code == 0 ? kOk : kUsage;
    }

    try {
        if (*g) return cmd_gen(gen);
        if (*t) return cmd_train(train);
        if (*e) return cmd_eval(ev);
        if (*b) return cmd_ablate(ab);
        if (*x) return cmd_export(ex);
    } catch (const NumericError& err) {
        std::cerr << "numerical error: " << err.what() << "\n";
        return kNumeric;
    } catch (const IoError& err) {
        std::cerr << "I/O error: " << err.what() << "\n";
        return kIo;
    } catch (const fs::filesystem_error& err) {
        std::cerr << "I/O error: " << err.what() << "\n";
        return kIo;
    } catch (const UsageError& err) {
        std::cerr << "error: " << err.what() << "\n";
        return kUsage;
    } catch (const std::invalid_argument& err) {
        std::cerr << "error: " << err.what() << "\n";
        return kUsage;
    }
    return kUsage;
}
