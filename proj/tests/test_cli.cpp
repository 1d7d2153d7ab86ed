#include "afd/afd.hpp"

#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace fs = std::filesystem;
using namespace afd;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "afd_cli_test";
const std::string kSmall = " --set 'model.block_channels=[4,8,8,8]' --set train.batch=8";

struct RunResult {
    int code;
    std::string out;
};

RunResult run(const std::string& args) {
    const auto capture = kRoot / "stdout.txt";
    const std::string cmd = std::string(AFD_CLI_PATH) + " " + args + " > " + capture.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    std::ifstream in(capture);
    std::stringstream ss;
    ss << in.rdbuf();
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, ss.str()};
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

std::size_t line_count(const fs::path& p) {
    const auto text = slurp(p);
    return static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n'));
}

class Cli : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        fs::remove_all(kRoot);
        fs::create_directories(kRoot);
        const auto r = run("gen --out " + (kRoot / "data").string() + " --count 16 --size 16 --seed 3");
        ASSERT_EQ(r.code, 0) << r.out;
        const auto t = run("train --data " + (kRoot / "data").string() + " --out " + (kRoot / "adad").string() +
                           " --epochs 2" + kSmall);
        ASSERT_EQ(t.code, 0) << t.out;
    }
    static fs::path data() { return kRoot / "data"; }
    static fs::path adad() { return kRoot / "adad" / "checkpoint.afdc"; }
};

}  // namespace

TEST_F(Cli, GenDefaultsAndDeterminism) {
    const auto dflt = run("gen --out " + (kRoot / "default").string());
    ASSERT_EQ(dflt.code, 0) << dflt.out;
    EXPECT_NE(dflt.out.find("train domain0=400 domain1=400 domain2=400 real=400"), std::string::npos) << dflt.out;
    EXPECT_NE(dflt.out.find("val domain0=100 domain1=100 domain2=100 real=100"), std::string::npos);
    EXPECT_NE(dflt.out.find("test domain0=100 domain1=100 domain2=100 real=100"), std::string::npos);
    fs::remove_all(kRoot / "default");

    const std::string flags = " --count 5 --size 8 --seed 9";
    ASSERT_EQ(run("gen --out " + (kRoot / "g1").string() + flags).code, 0);
    ASSERT_EQ(run("gen --out " + (kRoot / "g2").string() + flags).code, 0);
    std::size_t files = 0;
    for (const auto& e : fs::directory_iterator(kRoot / "g1")) {
        EXPECT_EQ(slurp(e.path()), slurp(kRoot / "g2" / e.path().filename())) << e.path();
        ++files;
    }
    EXPECT_EQ(files, 5u * 4 + 2);  // images, manifest, config

    EXPECT_EQ(run("gen --out " + (kRoot / "empty").string() + " --count 0").code, 0);
    EXPECT_TRUE(read_corpus(kRoot / "empty").samples.empty());
}

TEST_F(Cli, UsageErrorsExitTwo) {
    EXPECT_EQ(run("").code, 2);
    EXPECT_EQ(run("frobnicate").code, 2);
    EXPECT_EQ(run("gen").code, 2);
    EXPECT_EQ(run("gen --out " + (kRoot / "x").string() + " --domains 5").code, 2);
    EXPECT_EQ(run("train --data " + data().string() + " --out " + (kRoot / "x").string() + " --phase adat").code, 2);
    EXPECT_EQ(run("train --data " + data().string() + " --out " + (kRoot / "x").string() + " --set train.bogus=1").code, 2);
    EXPECT_EQ(run("ablate --grid tab9 --data " + data().string() + " --out " + (kRoot / "x").string()).code, 2);
    EXPECT_EQ(run("--help").code, 0);
}

TEST_F(Cli, IoErrorsExitThree) {
    EXPECT_EQ(run("eval --checkpoint " + (kRoot / "nope.afdc").string() + " --data " + data().string()).code, 3);
    EXPECT_EQ(run("train --data " + (kRoot / "no_corpus").string() + " --out " + (kRoot / "x").string()).code, 3);
    EXPECT_EQ(run("export --checkpoint " + (kRoot / "nope.afdc").string() + " --out " + (kRoot / "x").string()).code, 3);
}

TEST_F(Cli, NanAbortExitsFour) {
    auto corpus = read_corpus(data());
    for (auto& s : corpus.samples) s.image.pixels[3] = std::numeric_limits<float>::quiet_NaN();
    write_corpus(corpus, kRoot / "nan");
    const auto r = run("train --data " + (kRoot / "nan").string() + " --out " + (kRoot / "nan_out").string() +
                       " --epochs 1" + kSmall);
    EXPECT_EQ(r.code, 4) << r.out;
}

TEST_F(Cli, TrainWritesLogCheckpointAndResolvedConfig) {
    EXPECT_TRUE(fs::exists(adad()));
    EXPECT_EQ(line_count(kRoot / "adad" / "train_log.jsonl"), 2u);
    const auto cfg = nlohmann::json::parse(slurp(kRoot / "adad" / "config.json"));
    EXPECT_EQ(cfg["train.adad_epochs"], 2);
    EXPECT_EQ(cfg["model.height"], 16);
    EXPECT_EQ(cfg["data.seed"], 3);

    // flags > --set > file > defaults
    {
        std::ofstream(kRoot / "cfg.json") << R"({"train.adad_epochs": 3, "train.gamma": 0.25, "train.margin": 0.2})";
    }
    const auto r = run("train --data " + data().string() + " --out " + (kRoot / "prec").string() + " --config " +
                       (kRoot / "cfg.json").string() + " --set train.gamma=0.5 --epochs 1" + kSmall);
    ASSERT_EQ(r.code, 0) << r.out;
    const auto prec = nlohmann::json::parse(slurp(kRoot / "prec" / "config.json"));
    EXPECT_EQ(prec["train.adad_epochs"], 1);
    EXPECT_EQ(prec["train.gamma"], 0.5);
    EXPECT_EQ(prec["train.margin"], 0.2);
    EXPECT_EQ(line_count(kRoot / "prec" / "train_log.jsonl"), 1u);
}

TEST_F(Cli, AdatPhase) {
    const auto out = kRoot / "adat";
    const auto r = run("train --phase adat --resume " + adad().string() + " --data " + data().string() + " --out " +
                       out.string() + " --iters 6 --set train.adat_eval_interval=2");
    ASSERT_EQ(r.code, 0) << r.out;
    EXPECT_EQ(line_count(out / "train_log.jsonl"), 3u);
    EXPECT_EQ(load_checkpoint(out / "checkpoint.afdc").phase, Phase::adat);
    EXPECT_EQ(run("train --phase adat --resume " + (out / "checkpoint.afdc").string() + " --data " + data().string() +
                  " --out " + (kRoot / "x").string())
                  .code,
              2);
    EXPECT_EQ(run("train --resume " + adad().string() + " --data " + data().string() + " --out " + (kRoot / "x").string())
                  .code,
              2);
}

TEST_F(Cli, EvalReportMatchesStdout) {
    const auto out = kRoot / "eval";
    const auto r = run("eval --checkpoint " + adad().string() + " --data " + data().string() + " --per-domain --out " +
                       out.string());
    ASSERT_EQ(r.code, 0) << r.out;
    const auto report = nlohmann::json::parse(slurp(out / "report.json"));
    const std::string whole = "split test acc " + report["whole"]["acc"].dump() + " auc " + report["whole"]["auc"].dump();
    EXPECT_NE(r.out.find(whole), std::string::npos) << r.out << "\nexpected: " << whole;
    ASSERT_EQ(report["per_domain"].size(), 3u);
    for (const auto& row : report["per_domain"]) {
        const std::string line = "domain " + row["domain"].dump() + " acc " + row["acc"].dump() + " auc " + row["auc"].dump();
        EXPECT_NE(r.out.find(line), std::string::npos) << line;
        // Each domain row holds that domain's fakes plus every real of the split.
        EXPECT_EQ(row["count"], 4);
    }
    EXPECT_EQ(report["whole"]["count"], 8);
}

TEST_F(Cli, ExportMasksAndAttention) {
    const auto out = kRoot / "export";
    const auto r = run("export --checkpoint " + adad().string() + " --out " + out.string());
    ASSERT_EQ(r.code, 0) << r.out;
    for (int i = 0; i < 3; ++i) EXPECT_TRUE(fs::exists(out / ("mask_" + std::to_string(i) + ".pgm")));
    std::ifstream att(out / "attention.txt");
    std::string line;
    std::size_t rows = 0;
    while (std::getline(att, line)) {
        std::istringstream ss(line);
        double v, total = 0.0;
        while (ss >> v) total += v;
        EXPECT_NEAR(total, 1.0, 1e-12);
        ++rows;
    }
    EXPECT_EQ(rows, 3u);

    const auto ckpt = load_checkpoint(adad());
    const auto model = model_from_checkpoint(ckpt);
    const auto& m = ckpt.config.train.model;
    const auto init = init_mask_logits(m.mask_mode, m.mask_init, m.n_masks, m.height, m.width, m.resolved_thresholds(),
                                       m.sharpness);
    const auto trained = masks_from_logits(model.mask_bank()), initial = masks_from_logits(init);
    double drift = 0.0;
    for (std::size_t k = 0; k < trained.numel(); ++k) drift += std::abs(trained.at(k) - initial.at(k));
    EXPECT_GT(drift / static_cast<double>(trained.numel()), 0.0);

    const auto sp = kRoot / "spatial";
    ASSERT_EQ(run("train --data " + data().string() + " --out " + sp.string() + " --epochs 1 --spatial-only" + kSmall).code, 0);
    EXPECT_EQ(run("export --checkpoint " + (sp / "checkpoint.afdc").string() + " --out " + (kRoot / "x").string()).code, 2);
}

TEST_F(Cli, AblateWritesOneRowPerConfiguration) {
    const auto out = kRoot / "ablate";
    const auto r = run("ablate --grid tab4 --data " + data().string() + " --out " + out.string() + " --epochs 1" + kSmall);
    ASSERT_EQ(r.code, 0) << r.out;
    std::ifstream csv(out / "tab4.csv");
    std::string line;
    std::getline(csv, line);
    EXPECT_EQ(line, "config,acc,auc");
    std::vector<std::string> labels;
    while (std::getline(csv, line)) labels.push_back(line.substr(0, line.find(',')));
    EXPECT_EQ(labels, (std::vector<std::string>{"All At Entry", "All At Exit", "Predefined", "Attention-based"}));
}
