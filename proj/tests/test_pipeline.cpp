#include "neuroencode/pipeline.hpp"

#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>

#include "doctest.h"
#include "json.hpp"
#include "neuroencode/config_json.hpp"
#include "neuroencode/rng.hpp"

using namespace neuroencode;
namespace fs = std::filesystem;

namespace {

EncoderConfig tiny_encoder() {
    EncoderConfig ec;
    ec.n_layers = 2;
    ec.d_model = 8;
    ec.n_heads = 2;
    ec.d_ff = 16;
    ec.frame_size = 16;
    ec.frame_stride = 8;
    ec.readout_layer = 2;
    ec.seed = 3;
    return ec;
}

CvConfig tiny_cv() {
    CvConfig cv;
    cv.alpha_grid = {1.0, 100.0};
    cv.n_folds = 2;
    cv.chunk_length = 2;
    return cv;
}

RunConfig tiny_run(const fs::path& root) {
    RunConfig cfg;
    cfg.dataset_dir = (root / "data").string();
    cfg.out_dir = (root / "out").string();
    cfg.dataset.n_stories = 4;
    cfg.dataset.duration = 16.0;
    cfg.dataset.n_subjects = 2;
    cfg.dataset.n_voxels = 12;
    cfg.dataset.n_ac = 4;
    cfg.dataset.sigma = 0.4;
    cfg.dataset.teacher.base = tiny_encoder();
    cfg.dataset.teacher.layers = {0, 1};
    cfg.dataset.seed = 21;
    cfg.encoder = tiny_encoder();
    cfg.train.learning_rate = 1e-4;
    cfg.train.epochs = 2;
    cfg.train.batch_trs = 5;
    cfg.train.head_rank = 4;
    cfg.train.eval_cv = tiny_cv();
    cfg.train.seed = 5;
    cfg.eval_cv = tiny_cv();
    cfg.probe.cv = tiny_cv();
    return cfg;
}

fs::path fresh_root(const std::string& name) {
    const fs::path root = fs::temp_directory_path() / name;
    fs::remove_all(root);
    fs::create_directories(root);
    return root;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    return std::string(std::istreambuf_iterator<char>(in), {});
}

std::size_t line_count(const fs::path& p) {
    const std::string text = slurp(p);
    std::size_t n = 0;
    for (char c : text)
        if (c == '\n') ++n;
    return n;
}

void run_full_pipeline(const RunConfig& cfg) {
    cmd_gen(cfg);
    cmd_features(cfg);
    cmd_fit(cfg);
    cmd_finetune(cfg);
    cmd_eval(cfg);
    cmd_transfer(cfg);
    cmd_probe(cfg);
    cmd_report(cfg);
}

}  // namespace

TEST_CASE("csv numbers use fixed six decimals") {
    CHECK(csv_number(0.5) == "0.500000");
    CHECK(csv_number(-1.25) == "-1.250000");
    CHECK(csv_number(1.0 / 3.0) == "0.333333");
    CHECK(csv_number(std::numeric_limits<double>::quiet_NaN()) == "");
    CHECK(csv_number(std::numeric_limits<double>::infinity()) == "");
}

TEST_CASE("scope table averages voxels before taking percent change") {
    Vector pre(4), ft(4);
    pre << 0.2, 0.2, 0.4, 0.4;
    ft << 0.3, 0.1, 0.5, 0.5;
    RoiLabels rois;
    rois.ac = {1, 1, 0, 0};
    rois.left = {1, 0, 1, 0};

    const auto rows = scope_table(pre, ft, rois, {"all", "ac", "non_ac"});
    REQUIRE(rows.size() == 3);
    CHECK(rows[0].rho_pre == doctest::Approx(0.3));
    CHECK(rows[0].rho_ft == doctest::Approx(0.35));
    CHECK(rows[0].pct == doctest::Approx(100.0 * 0.05 / 0.3));
    CHECK(rows[1].rho_pre == doctest::Approx(0.2));
    CHECK(rows[1].pct == doctest::Approx(0.0));
    CHECK(rows[2].pct == doctest::Approx(25.0));

    const Vector zero = Vector::Zero(4);
    const auto degenerate = scope_table(zero, ft, rois, {"all"});
    CHECK(!std::isfinite(degenerate[0].pct));

    CHECK_THROWS_AS(scope_table(pre, ft.head(2), rois, {"all"}), std::invalid_argument);
}

TEST_CASE("run config loads from json and honors overrides") {
    const fs::path root = fresh_root("ne_pipeline_config");
    RunConfig cfg = tiny_run(root);

    const fs::path path = root / "run.json";
    {
        std::ofstream out(path);
        out << nlohmann::json(cfg).dump(2);
    }
    const RunConfig loaded = load_run_config(path.string());
    CHECK(loaded.dataset_dir == cfg.dataset_dir);
    CHECK(loaded.roi == "all");
    CHECK(loaded.train.epochs == 2);
    CHECK(loaded.encoder.d_model == 8);
    CHECK(loaded.probe.cv.n_folds == 2);
    CHECK(nlohmann::json(loaded) == nlohmann::json(cfg));

    RunConfig over = loaded;
    RunOverrides ov;
    ov.roi = "ac";
    ov.subject = 1;
    ov.out = (root / "elsewhere").string();
    ov.seed = 99;
    apply_overrides(over, ov);
    CHECK(over.roi == "ac");
    CHECK(over.train_subjects == std::vector<int>{1});
    CHECK(over.test_subjects == std::vector<int>{1});
    CHECK(over.out_dir == (root / "elsewhere").string());
    CHECK(over.dataset.seed == 99);
    CHECK(over.train.seed == 99);

    RunOverrides bad;
    bad.roi = "cortex";
    CHECK_THROWS_AS(apply_overrides(over, bad), std::invalid_argument);

    {
        std::ofstream out(path);
        out << "{ not json";
    }
    CHECK_THROWS_AS(load_run_config(path.string()), std::invalid_argument);
    CHECK_THROWS_AS(load_run_config((root / "missing.json").string()),
                    std::invalid_argument);
}

TEST_CASE("story scores reproduce the refit evaluation on validation stories") {
    const fs::path root = fresh_root("ne_pipeline_scores");
    const RunConfig cfg = tiny_run(root);
    Dataset ds = build_dataset(cfg.dataset);
    const SubjectData data = load_subject_data(ds, 0);
    const EncoderWeights w = init_encoder(cfg.encoder);

    const EncodingEval ev = encoding_eval(w, nullptr, data, cfg.eval_cv);
    const Vector rho =
        story_scores(w, nullptr, data, ds.split.train, ds.split.val, cfg.eval_cv);
    REQUIRE(rho.size() == ev.rho.size());
    CHECK((rho - ev.rho).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("pipeline commands compose and their artifacts agree") {
    const fs::path root = fresh_root("ne_pipeline_full");
    const RunConfig cfg = tiny_run(root);
    const fs::path out = cfg.out_dir;

    CHECK_THROWS_WITH_AS(cmd_features(cfg), doctest::Contains("run the gen command"),
                         std::invalid_argument);

    const nlohmann::json gen = cmd_gen(cfg);
    CHECK(gen.at("stories").get<int>() == 4);
    CHECK(fs::exists(fs::path(cfg.dataset_dir) / "manifest.json"));
    CHECK(fs::exists(out / "manifests" / "gen.json"));

    // fit before features: clear error, no partial fit outputs
    CHECK_THROWS_WITH_AS(cmd_fit(cfg), doctest::Contains("run the features command"),
                         std::invalid_argument);
    CHECK(!fs::exists(out / "fit"));
    CHECK(!fs::exists(out / ".stage_fit"));

    const nlohmann::json feats = cmd_features(cfg);
    CHECK(feats.at("stories").get<int>() == 4);
    for (int i = 0; i < 4; ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "story_%03d.bin", i);
        CHECK(fs::exists(out / "features" / "pretrained" / name));
    }

    cmd_fit(cfg);
    const fs::path bl0 = out / "fit" / "subject_000" / "baseline.bin";
    REQUIRE(fs::exists(bl0));
    const std::string first = slurp(bl0);
    cmd_fit(cfg);
    CHECK(slurp(bl0) == first);

    CHECK_THROWS_WITH_AS(cmd_eval(cfg), doctest::Contains("run the finetune command"),
                         std::invalid_argument);
    CHECK(!fs::exists(out / "eval"));

    const nlohmann::json ft = cmd_finetune(cfg);
    CHECK(ft.at("runs").size() == 2);
    for (int s = 0; s < 2; ++s) {
        char tag[32];
        std::snprintf(tag, sizeof tag, "subject_%03d_all", s);
        CHECK(fs::exists(out / "finetune" / tag / "best.json"));
        CHECK(line_count(out / "finetune" / tag / "epoch_log.jsonl") == 3);
    }

    const nlohmann::json ev = cmd_eval(cfg);
    const fs::path eval0 = out / "eval" / "subject_000_all.csv";
    REQUIRE(fs::exists(eval0));
    CHECK(line_count(eval0) == 6);  // header + all/ac/non_ac/left/right
    const std::string eval_bytes = slurp(eval0);
    cmd_eval(cfg);
    CHECK(slurp(eval0) == eval_bytes);

    // the eval baseline column restates the stored fit artifact
    const double rho_pre_all =
        ev.at("subjects")[0].at("scopes")[0].at("rho_pre").get<double>();
    const nlohmann::json fit_manifest =
        nlohmann::json::parse(slurp(out / "manifests" / "fit.json"));
    const double stored =
        fit_manifest.at("outputs")[0].at("mean_rho_test").get<double>();
    CHECK(rho_pre_all == doctest::Approx(stored).epsilon(1e-12));

    const nlohmann::json tr = cmd_transfer(cfg);
    const fs::path trf = out / "transfer" / "transfer_all.csv";
    REQUIRE(fs::exists(trf));
    CHECK(line_count(trf) == 1 + 2 * 2 * 3);

    // diagonal transfer cells equal the within-subject evaluation rows
    const std::string eval_text = slurp(eval0);
    for (const auto& cell : tr.at("cells")) {
        if (cell.at("train_subject") != 0 || cell.at("test_subject") != 0) continue;
        const std::string needle = "0,all," + cell.at("scope").get<std::string>() + "," +
                                   csv_number(cell.at("rho_pre").get<double>()) + "," +
                                   csv_number(cell.at("rho_ft").get<double>());
        CHECK(eval_text.find(needle) != std::string::npos);
    }

    const nlohmann::json pr = cmd_probe(cfg);
    const fs::path prf = out / "probes" / "probes_all.csv";
    REQUIRE(fs::exists(prf));
    CHECK(pr.at("models").get<int>() == 3);
    CHECK(line_count(prf) == 1 + 3 * 3 * 2);  // models x layers x kinds
    {
        std::ifstream in(prf);
        std::string header;
        std::getline(in, header);
        CHECK(header == "model_id,layer,probe_kind,r2,r2_minus_pretrained");
        std::string row;
        int pretrained_rows = 0;
        while (std::getline(in, row))
            if (row.rfind("pretrained,", 0) == 0) {
                ++pretrained_rows;
                CHECK(row.substr(row.size() - 9) == ",0.000000");
            }
        CHECK(pretrained_rows == 6);
    }

    const nlohmann::json rep = cmd_report(cfg);
    for (const char* name : {"epochs.csv", "roi_improvement.csv", "transfer.csv",
                             "probes.csv"})
        CHECK(fs::exists(out / "report" / name));
    CHECK(line_count(out / "report" / "epochs.csv") == 1 + 2 * 3);
    CHECK(line_count(out / "report" / "roi_improvement.csv") == 1 + 2 * 5);
    CHECK(line_count(out / "report" / "transfer.csv") == 1 + 12);
    CHECK(line_count(out / "report" / "probes.csv") == 1 + 18);
    CHECK(rep.at("rows").at("epochs").get<int>() == 6);

    fs::remove_all(root);
}

TEST_CASE("report demands either runs or a clear empty-directory error") {
    const fs::path root = fresh_root("ne_pipeline_report");
    RunConfig cfg = tiny_run(root);
    CHECK_THROWS_WITH_AS(cmd_report(cfg), doctest::Contains("no runs found"),
                         std::invalid_argument);
    fs::create_directories(fs::path(cfg.out_dir) / "eval");
    write_csv((fs::path(cfg.out_dir) / "eval" / "subject_000_all.csv").string(),
              {"subject", "roi_trained", "scope", "rho_pre", "rho_ft", "pct_improvement"},
              {{"0", "all", "all", "0.400000", "0.440000", "10.000000"}});
    CHECK_THROWS_WITH_AS(cmd_report(cfg), doctest::Contains("report inputs missing"),
                         std::invalid_argument);
    fs::remove_all(root);
}

TEST_CASE("two runs from one config produce byte-identical reports") {
    const fs::path ra = fresh_root("ne_pipeline_det_a");
    const fs::path rb = fresh_root("ne_pipeline_det_b");
    run_full_pipeline(tiny_run(ra));
    run_full_pipeline(tiny_run(rb));
    for (const char* name : {"epochs.csv", "roi_improvement.csv", "transfer.csv",
                             "probes.csv"})
        CHECK(slurp(ra / "out" / "report" / name) == slurp(rb / "out" / "report" / name));
    fs::remove_all(ra);
    fs::remove_all(rb);
}
