#include "neuroencode/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <system_error>

#include "neuroencode/config_json.hpp"
#include "neuroencode/container.hpp"
#include "neuroencode/hash.hpp"
#include "neuroencode/model_io.hpp"
#include "neuroencode/parallel.hpp"

namespace neuroencode {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

const std::vector<std::string> kAllScopes = {"all", "ac", "non_ac", "left", "right"};
const std::vector<std::string> kTransferScopes = {"all", "ac", "non_ac"};

std::string read_file(const fs::path& p, const std::string& what) {
    std::ifstream in(p, std::ios::binary);
    require(in.good(), "cannot read " + what + " at '" + p.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string file_checksum(const fs::path& p, const std::string& what) {
    const std::string bytes = read_file(p, what);
    return hash_hex(fnv1a64(bytes.data(), bytes.size()));
}

void write_text(const fs::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    require(out.good(), "cannot write '" + p.string() + "'");
    out << text;
    out.flush();
    require(out.good(), "failed writing '" + p.string() + "'");
}

std::vector<std::string> read_lines(const fs::path& p, const std::string& what) {
    std::istringstream in(read_file(p, what));
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) lines.push_back(line);
    return lines;
}

std::string tag3(const char* prefix, int n) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s_%03d", prefix, n);
    return std::string(buf);
}

std::string run_tag(int subject, const std::string& roi) {
    return tag3("subject", subject) + "_" + roi;
}

Matrix vstack(const std::vector<Matrix>& parts) {
    require(!parts.empty(), "pipeline: nothing to stack");
    Index rows = 0;
    for (const Matrix& p : parts) {
        require(p.cols() == parts.front().cols(), "pipeline: column mismatch");
        rows += p.rows();
    }
    Matrix out(rows, parts.front().cols());
    Index r = 0;
    for (const Matrix& p : parts) {
        out.middleRows(r, p.rows()) = p;
        r += p.rows();
    }
    return out;
}

// Products are built under a hidden staging directory and renamed into place
// only when the command succeeds, so a failed run leaves no partial outputs
// and never corrupts the results of an earlier run.
class Stage {
  public:
    Stage(const fs::path& root, const std::string& tag) : root_(root) {
        tmp_ = root_ / (".stage_" + tag);
        std::error_code ec;
        fs::remove_all(tmp_, ec);
    }

    ~Stage() {
        if (!committed_) {
            std::error_code ec;
            fs::remove_all(tmp_, ec);
        }
    }

    fs::path path(const std::string& rel) {
        const fs::path p = tmp_ / rel;
        fs::create_directories(p.parent_path());
        if (std::find(rels_.begin(), rels_.end(), rel) == rels_.end()) rels_.push_back(rel);
        return p;
    }

    fs::path dir(const std::string& rel) {
        const fs::path p = path(rel);
        fs::create_directories(p);
        return p;
    }

    void commit() {
        for (const std::string& rel : rels_) {
            const fs::path target = root_ / rel;
            fs::create_directories(target.parent_path());
            fs::remove_all(target);
            fs::rename(tmp_ / rel, target);
        }
        fs::remove_all(tmp_);
        committed_ = true;
    }

  private:
    fs::path root_, tmp_;
    std::vector<std::string> rels_;
    bool committed_ = false;
};

void write_manifest(Stage& st, const RunConfig& cfg, const std::string& cmd, json inputs,
                    json outputs) {
    json m;
    m["command"] = cmd;
    m["config"] = cfg;
    const std::string dump = json(cfg).dump();
    m["config_checksum"] = hash_hex(fnv1a64(dump.data(), dump.size()));
    m["inputs"] = std::move(inputs);
    m["outputs"] = std::move(outputs);
    write_text(st.path("manifests/" + cmd + ".json"), m.dump(2) + "\n");
}

Dataset open_dataset(const RunConfig& cfg) {
    if (!fs::exists(fs::path(cfg.dataset_dir) / "manifest.json"))
        throw std::invalid_argument("dataset not found at '" + cfg.dataset_dir +
                                    "'; run the gen command first");
    return load_dataset(cfg.dataset_dir);
}

json dataset_input(const RunConfig& cfg) {
    return {{"dataset_manifest", file_checksum(fs::path(cfg.dataset_dir) / "manifest.json",
                                               "dataset manifest")}};
}

std::vector<int> resolve_subjects(const std::vector<int>& sel, const Dataset& ds,
                                  const std::string& which) {
    std::vector<int> ids;
    for (const SubjectSpec& s : ds.subjects) ids.push_back(s.id);
    if (sel.empty()) return ids;
    std::vector<int> out;
    for (int s : sel) {
        require(std::find(ids.begin(), ids.end(), s) != ids.end(),
                which + " subject " + std::to_string(s) + " is not in the dataset");
        if (std::find(out.begin(), out.end(), s) == out.end()) out.push_back(s);
    }
    return out;
}

fs::path design_path(const RunConfig& cfg, int story) {
    return fs::path(cfg.out_dir) / "features" / "pretrained" /
           (tag3("story", story) + ".bin");
}

Matrix load_design_file(const RunConfig& cfg, int story) {
    const fs::path p = design_path(cfg, story);
    if (!fs::exists(p))
        throw std::invalid_argument("features for story " + std::to_string(story) +
                                    " not found; run the features command first");
    const Container c = read_container(p.string());
    require(c.meta.value("kind", "") == "design" && c.meta.value("story", -1) == story,
            "unexpected feature container at '" + p.string() + "'");
    return c.at("x");
}

struct Baseline {
    Vector rho_val, rho_test, alpha;
};

Baseline load_baseline(const RunConfig& cfg, int subject) {
    const fs::path p =
        fs::path(cfg.out_dir) / "fit" / tag3("subject", subject) / "baseline.bin";
    if (!fs::exists(p))
        throw std::invalid_argument("baseline for subject " + std::to_string(subject) +
                                    " not found; run the fit command first");
    const Container c = read_container(p.string());
    require(c.meta.value("kind", "") == "baseline" &&
                c.meta.value("subject", -1) == subject,
            "unexpected baseline container at '" + p.string() + "'");
    Baseline b;
    b.rho_val = c.at("rho_val").col(0);
    b.rho_test = c.at("rho_test").col(0);
    b.alpha = c.at("alpha").col(0);
    return b;
}

double scope_mean(const Vector& v, const std::vector<Index>& idx) {
    double acc = 0.0;
    for (Index i : idx) acc += v(i);
    return acc / static_cast<double>(idx.size());
}

std::vector<fs::path> sorted_entries(const fs::path& dir) {
    std::vector<fs::path> out;
    if (!fs::exists(dir)) return out;
    for (const auto& e : fs::directory_iterator(dir)) out.push_back(e.path());
    std::sort(out.begin(), out.end());
    return out;
}

fs::path finetune_run_dir(const RunConfig& cfg, int subject) {
    return fs::path(cfg.out_dir) / "finetune" / run_tag(subject, cfg.roi);
}

std::vector<int> story_union(const std::vector<int>& a, const std::vector<int>& b) {
    std::vector<int> ids = a;
    for (int id : b)
        if (std::find(ids.begin(), ids.end(), id) == ids.end()) ids.push_back(id);
    return ids;
}

}  // namespace

// ---- configuration ----------------------------------------------------------

void RunConfig::validate() const {
    require(!dataset_dir.empty(), "config: dataset_dir is required");
    require(!out_dir.empty(), "config: out_dir is required");
    require(std::find(kAllScopes.begin(), kAllScopes.end(), roi) != kAllScopes.end(),
            "config: roi must be one of all|ac|non_ac|left|right");
    for (int s : train_subjects)
        require(s >= 0, "config: train subject ids must be non-negative");
    for (int s : test_subjects)
        require(s >= 0, "config: test subject ids must be non-negative");
    encoder.validate();
    dataset.validate();
    train.validate();
    eval_cv.validate();
    probe.filterbank.validate();
    probe.cv.validate();
}

RunConfig load_run_config(const std::string& path) {
    json j;
    try {
        j = json::parse(read_file(path, "config"));
    } catch (const json::exception& e) {
        throw std::invalid_argument("config '" + path + "' is not valid JSON: " + e.what());
    }
    RunConfig cfg;
    try {
        cfg = j.get<RunConfig>();
    } catch (const json::exception& e) {
        throw std::invalid_argument("config '" + path + "': " + e.what());
    }
    cfg.validate();
    return cfg;
}

void apply_overrides(RunConfig& cfg, const RunOverrides& ov) {
    if (ov.roi) cfg.roi = *ov.roi;
    if (ov.out) cfg.out_dir = *ov.out;
    if (ov.subject) {
        cfg.train_subjects = {*ov.subject};
        cfg.test_subjects = {*ov.subject};
    }
    if (ov.seed) {
        cfg.dataset.seed = *ov.seed;
        cfg.train.seed = *ov.seed;
    }
    cfg.validate();
}

// ---- shared evaluation pieces -------------------------------------------------

DesignMap build_designs(const EncoderWeights& w, const LoraAdapterSet* adapters,
                        const std::vector<Waveform>& waves, const std::vector<int>& ids,
                        double tr) {
    DesignMap m;
    for (int id : ids) {
        if (m.count(id)) continue;
        require(id >= 0 && static_cast<std::size_t>(id) < waves.size() &&
                    !waves[static_cast<std::size_t>(id)].samples.empty(),
                "design: missing waveform for story " + std::to_string(id));
        m.emplace(id, story_design(w, adapters, waves[static_cast<std::size_t>(id)],
                                   w.config.readout_layer, tr));
    }
    return m;
}

Vector design_scores(const DesignMap& designs, const SubjectData& data,
                     const std::vector<int>& fit_stories,
                     const std::vector<int>& score_stories, const CvConfig& cv) {
    require(!fit_stories.empty() && !score_stories.empty(),
            "scores: fit and score story lists must be non-empty");
    auto collect = [&](const std::vector<int>& ids, std::vector<Matrix>& xs,
                       std::vector<Matrix>& ys) {
        for (int id : ids) {
            const auto it = designs.find(id);
            require(it != designs.end(), "scores: no design for story " + std::to_string(id));
            require(id >= 0 && static_cast<std::size_t>(id) < data.responses.size(),
                    "scores: no responses for story " + std::to_string(id));
            const Matrix& y = data.responses[static_cast<std::size_t>(id)];
            require(it->second.rows() == y.rows(),
                    "scores: design rows disagree with response volumes for story " +
                        std::to_string(id));
            xs.push_back(it->second);
            ys.push_back(y);
        }
    };
    std::vector<Matrix> xf, yf, xs, ys;
    collect(fit_stories, xf, yf);
    collect(score_stories, xs, ys);
    const Matrix x_fit = vstack(xf);
    const Matrix y_fit = vstack(yf);
    const CvSelection sel = cv_select_alpha(x_fit, y_fit, cv);
    const RidgeFit fit = fit_ridge(x_fit, y_fit, sel.alpha);
    return score_temporal(vstack(ys), predict(fit, vstack(xs))).rho;
}

Vector story_scores(const EncoderWeights& w, const LoraAdapterSet* adapters,
                    const SubjectData& data, const std::vector<int>& fit_stories,
                    const std::vector<int>& score_stories, const CvConfig& cv) {
    const DesignMap designs = build_designs(
        w, adapters, data.waves, story_union(fit_stories, score_stories), data.tr);
    return design_scores(designs, data, fit_stories, score_stories, cv);
}

std::vector<ScopeImprovement> scope_table(const Vector& rho_pre, const Vector& rho_ft,
                                          const RoiLabels& rois,
                                          const std::vector<std::string>& scopes) {
    require(rho_pre.size() == rho_ft.size(), "scope table: score lengths disagree");
    require(static_cast<Index>(rois.ac.size()) == rho_pre.size(),
            "scope table: ROI labels do not match the score length");
    std::vector<ScopeImprovement> rows;
    for (const std::string& scope : scopes) {
        const std::vector<Index> idx = roi_indices(rois, scope);
        require(!idx.empty(), "scope '" + scope + "' selects no voxels");
        ScopeImprovement r;
        r.scope = scope;
        r.rho_pre = scope_mean(rho_pre, idx);
        r.rho_ft = scope_mean(rho_ft, idx);
        r.pct = std::abs(r.rho_pre) < 1e-12
                    ? std::numeric_limits<double>::quiet_NaN()
                    : 100.0 * (r.rho_ft - r.rho_pre) / r.rho_pre;
        rows.push_back(std::move(r));
    }
    return rows;
}

BestModel load_best_model(const std::string& run_dir, const EncoderWeights& base) {
    const fs::path dir = run_dir;
    const fs::path best = dir / "best.json";
    if (!fs::exists(best))
        throw std::invalid_argument("no fine-tuning run at '" + run_dir +
                                    "'; run the finetune command first");
    const json j = json::parse(read_file(best, "best.json"));
    BestModel bm;
    bm.best_epoch = j.at("best_epoch").get<int>();
    bm.val_rho = j.at("val_rho").get<double>();
    char name[32];
    std::snprintf(name, sizeof name, "epoch_%03d.bin", bm.best_epoch);
    const fs::path ckpt = dir / "checkpoints" / name;
    require(fs::exists(ckpt), "missing checkpoint '" + ckpt.string() + "'");
    const Container c = read_container(ckpt.string());
    const std::string kind = c.meta.value("kind", "");
    if (kind == "lora_adapters") {
        bm.weights = base;
        bm.adapters = load_adapters(ckpt.string());
    } else if (kind == "encoder") {
        bm.weights = load_encoder(ckpt.string());
    } else {
        throw std::invalid_argument("unrecognized checkpoint kind '" + kind + "' in '" +
                                    ckpt.string() + "'");
    }
    return bm;
}

// ---- CSV ----------------------------------------------------------------------

std::string csv_number(double v) {
    if (!std::isfinite(v)) return "";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return std::string(buf);
}

void write_csv(const std::string& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows) {
    std::ostringstream out;
    auto line = [&](const std::vector<std::string>& cells) {
        require(cells.size() == header.size(), "csv row width disagrees with the header");
        for (std::size_t i = 0; i < cells.size(); ++i) {
            if (i) out << ',';
            out << cells[i];
        }
        out << '\n';
    };
    for (std::size_t i = 0; i < header.size(); ++i) {
        if (i) out << ',';
        out << header[i];
    }
    out << '\n';
    for (const auto& r : rows) line(r);
    write_text(path, out.str());
}

// ---- commands -------------------------------------------------------------------

json cmd_gen(const RunConfig& cfg) {
    cfg.validate();
    const fs::path target = cfg.dataset_dir;
    const fs::path tmp = target.parent_path() / (target.filename().string() + ".stage");
    std::error_code ec;
    fs::remove_all(tmp, ec);
    Dataset ds;
    try {
        ds = make_dataset(cfg.dataset, tmp.string());
    } catch (...) {
        fs::remove_all(tmp, ec);
        throw;
    }
    fs::remove_all(target);
    if (!target.parent_path().empty()) fs::create_directories(target.parent_path());
    fs::rename(tmp, target);

    const std::string checksum = file_checksum(target / "manifest.json", "dataset manifest");
    Stage st(cfg.out_dir, "gen");
    write_manifest(st, cfg, "gen", json::object(),
                   {{"dataset_dir", cfg.dataset_dir}, {"dataset_manifest", checksum}});
    st.commit();

    json s;
    s["command"] = "gen";
    s["dataset_dir"] = cfg.dataset_dir;
    s["stories"] = ds.stories.size();
    s["subjects"] = ds.subjects.size();
    s["voxels"] = cfg.dataset.n_voxels;
    s["dataset_manifest"] = checksum;
    return s;
}

json cmd_features(const RunConfig& cfg) {
    cfg.validate();
    const Dataset ds = open_dataset(cfg);
    const EncoderWeights w = init_encoder(cfg.encoder);
    Stage st(cfg.out_dir, "features");
    const fs::path fdir = st.dir("features/pretrained");
    json files = json::array();
    Index rows = 0, cols = 0;
    for (const StorySpec& sp : ds.stories) {
        const Waveform wav = dataset_story_wave(ds, sp.id);
        Matrix x = story_design(w, nullptr, wav, w.config.readout_layer, ds.cfg.tr);
        rows = x.rows();
        cols = x.cols();
        Container c;
        c.meta = {{"kind", "design"},    {"story", sp.id},
                  {"layer", w.config.readout_layer}, {"tr", ds.cfg.tr},
                  {"model", "pretrained"}, {"delays", default_delays()}};
        c.sections.push_back({"x", std::move(x), false});
        const std::string name = tag3("story", sp.id) + ".bin";
        write_container((fdir / name).string(), c);
        files.push_back("features/pretrained/" + name);
    }
    write_manifest(st, cfg, "features", dataset_input(cfg), files);
    st.commit();

    json s;
    s["command"] = "features";
    s["stories"] = ds.stories.size();
    s["rows_per_story"] = rows;
    s["columns"] = cols;
    s["model_checksum"] = hash_hex(w.checksum());
    return s;
}

json cmd_fit(const RunConfig& cfg) {
    cfg.validate();
    const Dataset ds = open_dataset(cfg);
    std::vector<int> subjects = resolve_subjects(cfg.train_subjects, ds, "train");
    for (int s : resolve_subjects(cfg.test_subjects, ds, "test"))
        if (std::find(subjects.begin(), subjects.end(), s) == subjects.end())
            subjects.push_back(s);

    DesignMap designs;
    for (const std::vector<int>* ids : {&ds.split.train, &ds.split.val, &ds.split.test})
        for (int id : *ids)
            if (!designs.count(id)) designs.emplace(id, load_design_file(cfg, id));

    Stage st(cfg.out_dir, "fit");
    json per_subject = json::array();
    for (int s : subjects) {
        SubjectData data = load_subject_data(ds, s);
        auto collect = [&](const std::vector<int>& ids, std::vector<Matrix>& xs,
                           std::vector<Matrix>& ys) {
            for (int id : ids) {
                const Matrix& x = designs.at(id);
                const Matrix& y = data.responses[static_cast<std::size_t>(id)];
                require(x.rows() == y.rows(),
                        "fit: stored features disagree with response volumes for story " +
                            std::to_string(id) + "; regenerate features");
                xs.push_back(x);
                ys.push_back(y);
            }
        };
        std::vector<Matrix> xtr, ytr, xv, yv, xte, yte;
        collect(ds.split.train, xtr, ytr);
        collect(ds.split.val, xv, yv);
        collect(ds.split.test, xte, yte);
        const Matrix x_train = vstack(xtr);
        const Matrix y_train = vstack(ytr);
        const CvSelection sel = cv_select_alpha(x_train, y_train, cfg.eval_cv);
        const RidgeFit fit = fit_ridge(x_train, y_train, sel.alpha);
        const Vector rho_val = score_temporal(vstack(yv), predict(fit, vstack(xv))).rho;
        const Vector rho_test = score_temporal(vstack(yte), predict(fit, vstack(xte))).rho;

        Container c;
        c.meta = {{"kind", "baseline"},
                  {"subject", s},
                  {"mean_rho_val", rho_val.mean()},
                  {"mean_rho_test", rho_test.mean()}};
        c.sections.push_back({"rho_val", Matrix(rho_val), false});
        c.sections.push_back({"rho_test", Matrix(rho_test), false});
        c.sections.push_back({"alpha", Matrix(sel.alpha), false});
        write_container(st.path("fit/" + tag3("subject", s) + "/baseline.bin").string(), c);

        per_subject.push_back({{"subject", s},
                               {"mean_rho_val", rho_val.mean()},
                               {"mean_rho_test", rho_test.mean()}});
    }
    write_manifest(st, cfg, "fit", dataset_input(cfg), per_subject);
    st.commit();

    json s;
    s["command"] = "fit";
    s["subjects"] = per_subject;
    return s;
}

json cmd_finetune(const RunConfig& cfg) {
    cfg.validate();
    const Dataset ds = open_dataset(cfg);
    const std::vector<int> subjects = resolve_subjects(cfg.train_subjects, ds, "train");
    const EncoderWeights base = init_encoder(cfg.encoder);

    Stage st(cfg.out_dir, "finetune");
    json runs = json::array();
    for (int s : subjects) {
        const SubjectData data = load_subject_data(ds, s);
        TrainConfig tcfg = cfg.train;
        tcfg.roi_mask = roi_indices(data.rois, cfg.roi);
        const std::string rel = "finetune/" + run_tag(s, cfg.roi);
        const FinetuneResult res = finetune(base, data, tcfg, st.dir(rel).string());
        const double rho0 = res.reports.front().val_rho;
        const double rho_best = res.reports[static_cast<std::size_t>(res.best_epoch)].val_rho;
        runs.push_back({{"subject", s},
                        {"roi", cfg.roi},
                        {"run_dir", rel},
                        {"best_epoch", res.best_epoch},
                        {"val_rho_epoch0", rho0},
                        {"val_rho_best", rho_best}});
    }
    write_manifest(st, cfg, "finetune", dataset_input(cfg), runs);
    st.commit();

    json s;
    s["command"] = "finetune";
    s["roi"] = cfg.roi;
    s["runs"] = runs;
    return s;
}

json cmd_eval(const RunConfig& cfg) {
    cfg.validate();
    const Dataset ds = open_dataset(cfg);
    const std::vector<int> subjects = resolve_subjects(cfg.train_subjects, ds, "train");
    const EncoderWeights base = init_encoder(cfg.encoder);
    const std::vector<std::string> header = {"subject", "roi_trained", "scope",
                                             "rho_pre",  "rho_ft",     "pct_improvement"};

    Stage st(cfg.out_dir, "eval");
    json per_subject = json::array();
    for (int s : subjects) {
        const BestModel bm = load_best_model(finetune_run_dir(cfg, s).string(), base);
        const SubjectData data = load_subject_data(ds, s);
        const Baseline bl = load_baseline(cfg, s);
        require(bl.rho_test.size() == static_cast<Index>(data.rois.ac.size()),
                "eval: baseline voxel count disagrees with the dataset");
        const Vector rho_ft =
            story_scores(bm.weights, bm.adapters ? &*bm.adapters : nullptr, data,
                         ds.split.train, ds.split.test, cfg.eval_cv);
        const auto rows = scope_table(bl.rho_test, rho_ft, data.rois, kAllScopes);

        std::vector<std::vector<std::string>> csv;
        json scopes = json::array();
        for (const ScopeImprovement& r : rows) {
            csv.push_back({std::to_string(s), cfg.roi, r.scope, csv_number(r.rho_pre),
                           csv_number(r.rho_ft), csv_number(r.pct)});
            scopes.push_back({{"scope", r.scope},
                              {"rho_pre", r.rho_pre},
                              {"rho_ft", r.rho_ft},
                              {"pct_improvement", r.pct}});
        }
        write_csv(st.path("eval/" + run_tag(s, cfg.roi) + ".csv").string(), header, csv);
        per_subject.push_back(
            {{"subject", s}, {"best_epoch", bm.best_epoch}, {"scopes", scopes}});
    }
    write_manifest(st, cfg, "eval", dataset_input(cfg), per_subject);
    st.commit();

    json s;
    s["command"] = "eval";
    s["roi"] = cfg.roi;
    s["subjects"] = per_subject;
    return s;
}

json cmd_transfer(const RunConfig& cfg) {
    cfg.validate();
    const Dataset ds = open_dataset(cfg);
    const std::vector<int> train_subs = resolve_subjects(cfg.train_subjects, ds, "train");
    const std::vector<int> test_subs = resolve_subjects(cfg.test_subjects, ds, "test");
    const EncoderWeights base = init_encoder(cfg.encoder);

    std::vector<BestModel> models;
    for (int t : train_subs)
        models.push_back(load_best_model(finetune_run_dir(cfg, t).string(), base));

    std::vector<SubjectData> test_data;
    std::vector<Vector> test_base;
    for (int e : test_subs) {
        test_data.push_back(load_subject_data(ds, e));
        test_base.push_back(load_baseline(cfg, e).rho_test);
    }

    const std::vector<int> ids = story_union(ds.split.train, ds.split.test);
    std::vector<Waveform> waves;
    for (int id : ids) {
        if (static_cast<std::size_t>(id) >= waves.size())
            waves.resize(static_cast<std::size_t>(id) + 1);
        waves[static_cast<std::size_t>(id)] = dataset_story_wave(ds, id);
    }

    const std::vector<std::string> header = {"train_subject", "test_subject",   "scope",
                                             "rho_pre",       "rho_ft", "pct_improvement"};
    std::vector<std::vector<std::string>> csv;
    json cells = json::array();
    for (std::size_t ti = 0; ti < train_subs.size(); ++ti) {
        const BestModel& bm = models[ti];
        const DesignMap designs = build_designs(
            bm.weights, bm.adapters ? &*bm.adapters : nullptr, waves, ids, ds.cfg.tr);

        std::vector<std::vector<ScopeImprovement>> slots(test_subs.size());
        parallel_for(static_cast<int>(test_subs.size()), [&](int ei) {
            const Vector rho_ft = design_scores(designs, test_data[static_cast<std::size_t>(ei)],
                                                ds.split.train, ds.split.test, cfg.eval_cv);
            slots[static_cast<std::size_t>(ei)] =
                scope_table(test_base[static_cast<std::size_t>(ei)], rho_ft,
                            test_data[static_cast<std::size_t>(ei)].rois, kTransferScopes);
        });

        for (std::size_t ei = 0; ei < test_subs.size(); ++ei) {
            for (const ScopeImprovement& r : slots[ei]) {
                csv.push_back({std::to_string(train_subs[ti]), std::to_string(test_subs[ei]),
                               r.scope, csv_number(r.rho_pre), csv_number(r.rho_ft),
                               csv_number(r.pct)});
                cells.push_back({{"train_subject", train_subs[ti]},
                                 {"test_subject", test_subs[ei]},
                                 {"scope", r.scope},
                                 {"rho_pre", r.rho_pre},
                                 {"rho_ft", r.rho_ft},
                                 {"pct_improvement", r.pct}});
            }
        }
    }

    Stage st(cfg.out_dir, "transfer");
    write_csv(st.path("transfer/transfer_" + cfg.roi + ".csv").string(), header, csv);
    write_manifest(st, cfg, "transfer", dataset_input(cfg), cells);
    st.commit();

    json s;
    s["command"] = "transfer";
    s["roi"] = cfg.roi;
    s["train_subjects"] = train_subs;
    s["test_subjects"] = test_subs;
    s["cells"] = cells;
    return s;
}

json cmd_probe(const RunConfig& cfg) {
    cfg.validate();
    const Dataset ds = open_dataset(cfg);
    const std::vector<int> subjects = resolve_subjects(cfg.train_subjects, ds, "train");
    const EncoderWeights base = init_encoder(cfg.encoder);

    std::vector<ProbeModel> models;
    models.push_back({"pretrained", base, std::nullopt});
    for (int s : subjects) {
        BestModel bm = load_best_model(finetune_run_dir(cfg, s).string(), base);
        models.push_back({tag3("subject", s), std::move(bm.weights), std::move(bm.adapters)});
    }

    const ProbeStories stories = probe_stories(ds);
    const std::vector<ProbeCell> cells = probe_sweep(models, stories, cfg.probe);

    std::vector<std::vector<std::string>> csv;
    for (const ProbeCell& c : cells)
        csv.push_back({c.model_id, std::to_string(c.layer), c.kind, csv_number(c.r2),
                       csv_number(c.r2_minus_pretrained)});

    Stage st(cfg.out_dir, "probe");
    write_csv(st.path("probes/probes_" + cfg.roi + ".csv").string(),
              {"model_id", "layer", "probe_kind", "r2", "r2_minus_pretrained"}, csv);
    write_manifest(st, cfg, "probe", dataset_input(cfg),
                   {{"cells", cells.size()}, {"models", models.size()}});
    st.commit();

    json s;
    s["command"] = "probe";
    s["models"] = models.size();
    s["cells"] = cells.size();
    return s;
}

json cmd_report(const RunConfig& cfg) {
    cfg.validate();
    const fs::path out = cfg.out_dir;

    std::vector<fs::path> run_dirs;
    for (const fs::path& d : sorted_entries(out / "finetune"))
        if (fs::exists(d / "epoch_log.jsonl")) run_dirs.push_back(d);
    auto csvs = [](const std::vector<fs::path>& entries) {
        std::vector<fs::path> out_paths;
        for (const fs::path& p : entries)
            if (p.extension() == ".csv") out_paths.push_back(p);
        return out_paths;
    };
    const std::vector<fs::path> eval_files = csvs(sorted_entries(out / "eval"));
    const std::vector<fs::path> transfer_files = csvs(sorted_entries(out / "transfer"));
    const std::vector<fs::path> probe_files = csvs(sorted_entries(out / "probes"));

    if (run_dirs.empty() && eval_files.empty() && transfer_files.empty() &&
        probe_files.empty())
        throw std::invalid_argument("no runs found in '" + cfg.out_dir + "'");

    std::vector<std::string> missing;
    if (run_dirs.empty()) missing.push_back("finetune epoch logs");
    if (eval_files.empty()) missing.push_back("eval tables");
    if (transfer_files.empty()) missing.push_back("transfer tables");
    if (probe_files.empty()) missing.push_back("probe tables");
    if (!missing.empty()) {
        std::string msg = "report inputs missing:";
        for (const std::string& m : missing) msg += " " + m + ",";
        msg.back() = ';';
        throw std::invalid_argument(msg + " complete the pipeline first");
    }

    Stage st(cfg.out_dir, "report");

    std::vector<std::vector<std::string>> epochs;
    for (const fs::path& d : run_dirs) {
        const std::string run_id = d.filename().string();
        for (const std::string& line : read_lines(d / "epoch_log.jsonl", "epoch log")) {
            const json j = json::parse(line);
            epochs.push_back(
                {run_id, std::to_string(j.at("epoch").get<int>()),
                 j.at("mean_loss").is_null() ? "" : csv_number(j.at("mean_loss").get<double>()),
                 j.at("val_rho").is_null() ? "" : csv_number(j.at("val_rho").get<double>()),
                 j.at("evaluated").get<bool>() ? "1" : "0",
                 std::to_string(j.at("n_degenerate").get<long>())});
        }
    }
    write_csv(st.path("report/epochs.csv").string(),
              {"run_id", "epoch", "mean_loss", "val_rho", "evaluated", "n_degenerate"},
              epochs);

    auto merge = [&](const std::vector<fs::path>& files, const std::string& lead) {
        std::vector<std::vector<std::string>> rows;
        std::string header;
        for (const fs::path& f : files) {
            const std::vector<std::string> lines = read_lines(f, "table");
            require(!lines.empty(), "empty table at '" + f.string() + "'");
            if (header.empty())
                header = lines.front();
            else
                require(header == lines.front(),
                        "inconsistent table headers under '" + f.parent_path().string() + "'");
            std::string id = f.stem().string();
            if (!lead.empty() && id.rfind(lead, 0) == 0) id = id.substr(lead.size());
            for (std::size_t i = 1; i < lines.size(); ++i) rows.push_back({id, lines[i]});
        }
        return std::pair<std::string, std::vector<std::vector<std::string>>>(header, rows);
    };

    auto emit = [&](const std::string& rel, const std::string& id_col,
                    const std::pair<std::string, std::vector<std::vector<std::string>>>& t) {
        std::ostringstream body;
        body << id_col << ',' << t.first << '\n';
        for (const auto& r : t.second) body << r[0] << ',' << r[1] << '\n';
        write_text(st.path(rel), body.str());
        return t.second.size();
    };

    const auto n_eval = emit("report/roi_improvement.csv", "run_id", merge(eval_files, ""));
    const auto n_transfer =
        emit("report/transfer.csv", "roi_trained", merge(transfer_files, "transfer_"));
    const auto n_probe = emit("report/probes.csv", "roi_trained", merge(probe_files, "probes_"));

    write_manifest(st, cfg, "report", json::object(),
                   {{"epochs", epochs.size()},
                    {"roi_improvement", n_eval},
                    {"transfer", n_transfer},
                    {"probes", n_probe}});
    st.commit();

    json s;
    s["command"] = "report";
    s["report_dir"] = (out / "report").string();
    s["rows"] = {{"epochs", epochs.size()},
                 {"roi_improvement", n_eval},
                 {"transfer", n_transfer},
                 {"probes", n_probe}};
    return s;
}

json run_command(const std::string& name, const RunConfig& cfg) {
    if (name == "gen") return cmd_gen(cfg);
    if (name == "features") return cmd_features(cfg);
    if (name == "fit") return cmd_fit(cfg);
    if (name == "finetune") return cmd_finetune(cfg);
    if (name == "eval") return cmd_eval(cfg);
    if (name == "transfer") return cmd_transfer(cfg);
    if (name == "probe") return cmd_probe(cfg);
    if (name == "report") return cmd_report(cfg);
    throw std::invalid_argument("unknown command '" + name + "'");
}

}  // namespace neuroencode
