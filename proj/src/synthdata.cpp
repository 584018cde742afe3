#include "neuroencode/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "neuroencode/config_json.hpp"
#include "neuroencode/container.hpp"
#include "neuroencode/featurize.hpp"
#include "neuroencode/hash.hpp"
#include "neuroencode/rng.hpp"

namespace fs = std::filesystem;

namespace neuroencode {

namespace {

constexpr double kPcmScale = 32767.0;

double quantize_pcm16(double x) {
    return static_cast<double>(std::lround(std::clamp(x, -1.0, 1.0) * kPcmScale)) /
           kPcmScale;
}

struct TokenSignature {
    std::array<double, 3> freq;
    std::array<double, 3> amp;
    std::array<double, 3> phase;
};

TokenSignature token_signature(int token, const WaveformParams& p) {
    Rng rng(mix_seed(p.vocab_seed, static_cast<std::uint64_t>(token)));
    TokenSignature sig;
    const double f0 = rng.uniform(8.0, 60.0);
    double total = 0.0;
    for (int h = 0; h < 3; ++h) {
        sig.freq[static_cast<size_t>(h)] = f0 * (h + 1);
        sig.amp[static_cast<size_t>(h)] = rng.uniform(0.5, 1.0);
        total += sig.amp[static_cast<size_t>(h)];
        sig.phase[static_cast<size_t>(h)] = rng.uniform(0.0, 2.0 * M_PI);
    }
    for (auto& a : sig.amp) a *= p.token_amp / total;
    return sig;
}

std::string story_name(int id) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "story_%03d.wav-pcm", id);
    return buf;
}

std::string subject_name(int id) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "subj%d", id);
    return buf;
}

std::string response_name(int story_id) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "story_%03d.bin", story_id);
    return buf;
}

std::uint64_t file_checksum(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path);
    std::string bytes((std::istreambuf_iterator<char>(in)),
                      std::istreambuf_iterator<char>());
    return fnv1a64(bytes.data(), bytes.size());
}

}  // namespace

void StorySpec::validate(double window_s, double max_delay_s) const {
    if (duration < window_s + max_delay_s)
        throw std::invalid_argument("story too short for one window plus max delay");
    for (const TokenEvent& e : tokens)
        if (e.time < 0.0 || e.time > duration)
            throw std::invalid_argument("token event outside story");
}

void SubjectSpec::validate() const {
    if (n_voxels <= 0) throw std::invalid_argument("subject: no voxels");
    if (static_cast<Index>(rois.ac.size()) != n_voxels ||
        static_cast<Index>(rois.left.size()) != n_voxels)
        throw std::invalid_argument("subject: ROI labels must cover every voxel");
    if (w_true.cols() != n_voxels || sigma.size() != n_voxels)
        throw std::invalid_argument("subject: ground-truth shape mismatch");
    for (Index v = 0; v < n_voxels; ++v)
        if (!(sigma(v) >= 0.0)) throw std::invalid_argument("subject: sigma must be >= 0");
}

void TeacherSpec::validate() const {
    base.validate();
    if (rank < 1) throw std::invalid_argument("teacher: rank must be >= 1");
    if (layers.empty()) throw std::invalid_argument("teacher: no planted layers");
    for (int l : layers)
        if (l < 0 || l >= base.n_layers)
            throw std::invalid_argument("teacher: planted layer out of range");
    if (early_layer < 0 || early_layer > base.n_layers)
        throw std::invalid_argument("teacher: early layer out of range");
    if (resolved_deep() < 0 || resolved_deep() > base.n_layers)
        throw std::invalid_argument("teacher: deep layer out of range");
    if (!(lag_s >= 0.0) || !std::isfinite(lag_s))
        throw std::invalid_argument("teacher: lag must be finite and >= 0");
}

StorySpec make_story_spec(int id, double duration, std::uint64_t seed,
                          double tokens_per_second, int vocab_size) {
    StorySpec s;
    s.id = id;
    s.duration = duration;
    s.seed = seed;
    const int n_tokens = static_cast<int>(std::floor(duration * tokens_per_second));
    const double slot = duration / std::max(n_tokens, 1);
    WaveformParams defaults;
    if (n_tokens > 0 && slot <= defaults.token_dur)
        throw std::invalid_argument("token rate too high for the token duration");
    Rng rng(mix_seed(seed, 31));
    for (int i = 0; i < n_tokens; ++i) {
        TokenEvent e;
        e.time = slot * i + rng.uniform(0.0, slot - defaults.token_dur);
        e.token = rng.below(vocab_size);
        s.tokens.push_back(e);
    }
    s.validate();
    return s;
}

Waveform gen_waveform(const StorySpec& s, const WaveformParams& p) {
    s.validate();
    Waveform w;
    w.sample_rate = p.sample_rate;
    const auto n = static_cast<size_t>(std::llround(s.duration * p.sample_rate));
    w.samples.assign(n, 0.0);

    Rng rng(mix_seed(s.seed, 7));
    std::vector<double> freq(static_cast<size_t>(p.n_background));
    std::vector<double> amp(static_cast<size_t>(p.n_background));
    std::vector<double> phase(static_cast<size_t>(p.n_background));
    double total = 0.0;
    for (int i = 0; i < p.n_background; ++i) {
        freq[static_cast<size_t>(i)] = rng.uniform(0.3, 60.0);
        amp[static_cast<size_t>(i)] = rng.uniform(0.5, 1.0);
        phase[static_cast<size_t>(i)] = rng.uniform(0.0, 2.0 * M_PI);
        total += amp[static_cast<size_t>(i)];
    }
    for (double& a : amp) a *= p.background_amp / total;
    for (size_t i = 0; i < n; ++i) {
        const double t = static_cast<double>(i) / p.sample_rate;
        double x = 0.0;
        for (int k = 0; k < p.n_background; ++k)
            x += amp[static_cast<size_t>(k)] *
                 std::sin(2.0 * M_PI * freq[static_cast<size_t>(k)] * t +
                          phase[static_cast<size_t>(k)]);
        w.samples[i] = x;
    }

    for (const TokenEvent& e : s.tokens) {
        const TokenSignature sig = token_signature(e.token, p);
        const auto first = static_cast<size_t>(std::ceil(e.time * p.sample_rate));
        for (size_t i = first; i < n; ++i) {
            const double u = static_cast<double>(i) / p.sample_rate - e.time;
            if (u >= p.token_dur) break;
            const double env = std::sin(M_PI * u / p.token_dur);
            double x = 0.0;
            for (size_t h = 0; h < 3; ++h)
                x += sig.amp[h] * std::sin(2.0 * M_PI * sig.freq[h] * u + sig.phase[h]);
            w.samples[i] += env * env * x;
        }
    }

    for (double& x : w.samples) x = quantize_pcm16(x);
    return w;
}

SplitSpec default_split(std::vector<int> story_ids) {
    if (story_ids.size() < 4)
        throw std::invalid_argument("split needs at least four stories");
    std::sort(story_ids.begin(), story_ids.end());
    SplitSpec sp;
    sp.test.push_back(story_ids[0]);
    sp.val.assign(story_ids.begin() + 1, story_ids.begin() + 3);
    sp.train.assign(story_ids.begin() + 3, story_ids.end());
    return sp;
}

EncoderWeights teacher_weights(const TeacherSpec& ts) {
    ts.validate();
    EncoderWeights w = init_encoder(ts.base);
    LoraAdapterSet planted =
        init_adapters(ts.base, ts.rank, static_cast<double>(ts.rank), ts.seed);
    const double d = static_cast<double>(ts.base.d_model);
    Rng rng(mix_seed(ts.seed, 9001));
    for (int layer : ts.layers) {
        for (int m = 0; m < 3; ++m) {
            auto& ad = planted.layers[static_cast<size_t>(layer)][static_cast<size_t>(m)];
            ad.a = rng.gaussian_matrix(ts.rank, ts.base.d_model, 1.0 / std::sqrt(d));
            ad.b = rng.gaussian_matrix(ts.base.d_model, ts.rank,
                                       ts.magnitude / std::sqrt(double(ts.rank)));
        }
    }
    return merge_lora(w, planted);
}

Matrix teacher_feature_matrix(const EncoderWeights& tw, const TeacherSpec& ts,
                              const Waveform& wav, double tr) {
    const auto layers = extract_all_layers(tw, nullptr, wav);
    const int n_vols = static_cast<int>(std::llround(wav.duration() / tr));
    const Vector times = volume_times(n_vols, tr);
    const double cutoff = 1.0 / tr;
    const VolumeFeatures early =
        lanczos_resample(layers[static_cast<size_t>(ts.early_layer)], times, tr, cutoff);
    const VolumeFeatures deep = lanczos_resample(
        layers[static_cast<size_t>(ts.resolved_deep())], times, tr, cutoff);
    Matrix g(early.m.rows(), early.m.cols() + deep.m.cols());
    g << early.m, deep.m;
    // z-score before the lag so the shifted-in rows sit at the column mean
    // rather than at a raw-zero outlier far below the feature DC offset
    zscore_columns(g);
    if (ts.lag_s == 0.0) return g;
    return delay_stack(g, {ts.lag_s}, tr);
}

Matrix gen_responses(const SubjectSpec& subject, const Matrix& teacher_feats,
                     int story_id) {
    subject.validate();
    if (teacher_feats.cols() != subject.w_true.rows())
        throw std::invalid_argument("responses: teacher feature width mismatch");
    Matrix r = teacher_feats * subject.w_true;
    Rng rng(mix_seed(subject.seed, 2000 + static_cast<std::uint64_t>(story_id)));
    for (Index v = 0; v < r.cols(); ++v)
        for (Index t = 0; t < r.rows(); ++t) r(t, v) += subject.sigma(v) * rng.gaussian();
    zscore_columns(r);
    return r;
}

DatasetConfig::DatasetConfig() {
    teacher.base.n_layers = 4;
    teacher.base.readout_layer = 4;
}

void DatasetConfig::validate() const {
    if (n_stories < 4) throw std::invalid_argument("dataset: need at least 4 stories");
    if (n_subjects < 1) throw std::invalid_argument("dataset: need a subject");
    if (n_voxels < 2 || n_ac < 1 || n_ac >= n_voxels)
        throw std::invalid_argument("dataset: bad voxel/ROI counts");
    if (!(sigma >= 0.0)) throw std::invalid_argument("dataset: sigma must be >= 0");
    if (tr <= 0.0) throw std::invalid_argument("dataset: tr must be positive");
    const double vols = duration / tr;
    if (std::abs(vols - std::round(vols)) > 1e-9)
        throw std::invalid_argument("dataset: duration must be a whole number of volumes");
    teacher.validate();
}

Dataset build_dataset(const DatasetConfig& cfg) {
    cfg.validate();
    Dataset ds;
    ds.cfg = cfg;
    for (int i = 0; i < cfg.n_stories; ++i)
        ds.stories.push_back(make_story_spec(i, cfg.duration, mix_seed(cfg.seed, 101 + i),
                                             cfg.tokens_per_second,
                                             cfg.waveform.vocab_size));
    std::vector<int> ids(static_cast<size_t>(cfg.n_stories));
    for (int i = 0; i < cfg.n_stories; ++i) ids[static_cast<size_t>(i)] = i;
    ds.split = default_split(ids);

    const EncoderWeights tw = teacher_weights(cfg.teacher);
    Index total_rows = 0;
    for (const StorySpec& s : ds.stories) {
        const Waveform wav = gen_waveform(s, cfg.waveform);
        ds.teacher_feats.push_back(teacher_feature_matrix(tw, cfg.teacher, wav, cfg.tr));
        total_rows += ds.teacher_feats.back().rows();
    }
    const Index k = ds.teacher_feats.front().cols();
    Matrix g_all(total_rows, k);
    Index row = 0;
    for (const Matrix& g : ds.teacher_feats) {
        g_all.middleRows(row, g.rows()) = g;
        row += g.rows();
    }

    const Index d = cfg.teacher.base.d_model;
    for (int s = 0; s < cfg.n_subjects; ++s) {
        SubjectSpec subj;
        subj.id = s;
        subj.n_voxels = cfg.n_voxels;
        subj.seed = mix_seed(cfg.seed, 577 + static_cast<std::uint64_t>(s));
        subj.rois.ac.resize(static_cast<size_t>(cfg.n_voxels));
        subj.rois.left.resize(static_cast<size_t>(cfg.n_voxels));
        for (int v = 0; v < cfg.n_voxels; ++v) {
            subj.rois.ac[static_cast<size_t>(v)] = v < cfg.n_ac ? 1 : 0;
            subj.rois.left[static_cast<size_t>(v)] = v % 2 == 0 ? 1 : 0;
        }
        Rng rng(subj.seed);
        Vector emphasis(k);
        for (Index j = 0; j < k; ++j)
            emphasis(j) = std::exp(cfg.subject_emphasis * rng.gaussian());
        subj.w_true = Matrix::Zero(k, cfg.n_voxels);
        for (Index v = 0; v < cfg.n_voxels; ++v) {
            const Index off = subj.rois.ac[static_cast<size_t>(v)] ? 0 : d;
            for (Index j = 0; j < d; ++j)
                subj.w_true(off + j, v) = emphasis(off + j) * rng.gaussian();
        }
        // Unit dataset-level signal std per voxel, so sigma directly sets the
        // noise ceiling s/sqrt(s^2 + sigma^2).
        for (Index v = 0; v < cfg.n_voxels; ++v) {
            const Vector sig = g_all * subj.w_true.col(v);
            const double mu = sig.mean();
            const double sd =
                std::sqrt((sig.array() - mu).square().sum() / double(sig.size()));
            if (sd < 1e-10)
                throw std::runtime_error("dataset: degenerate teacher signal");
            subj.w_true.col(v) /= sd;
        }
        subj.sigma = Vector::Constant(cfg.n_voxels, cfg.sigma);
        subj.validate();
        ds.subjects.push_back(std::move(subj));
    }
    return ds;
}

void write_dataset(Dataset& ds, const std::string& dir) {
    fs::create_directories(dir + "/stories");
    fs::create_directories(dir + "/rois");
    fs::create_directories(dir + "/ground_truth");

    nlohmann::json manifest;
    manifest["format"] = "neuroencode-dataset";
    manifest["version"] = 1;
    manifest["config"] = ds.cfg;
    manifest["split"] = {{"test", ds.split.test},
                         {"val", ds.split.val},
                         {"train", ds.split.train}};

    std::string all_sums;
    nlohmann::json stories = nlohmann::json::array();
    for (const StorySpec& s : ds.stories) {
        const std::string rel = "stories/" + story_name(s.id);
        const std::string path = dir + "/" + rel;
        write_wav(path, gen_waveform(s, ds.cfg.waveform));
        const std::string sum = hash_hex(file_checksum(path));
        all_sums += sum;
        stories.push_back({{"id", s.id},
                           {"duration", s.duration},
                           {"seed", s.seed},
                           {"file", rel},
                           {"checksum", sum}});
    }
    manifest["stories"] = stories;

    nlohmann::json subjects = nlohmann::json::array();
    for (const SubjectSpec& subj : ds.subjects) {
        const std::string sdir = subject_name(subj.id);
        fs::create_directories(dir + "/responses/" + sdir);

        nlohmann::json roi;
        roi["subject"] = subj.id;
        roi["n_voxels"] = subj.n_voxels;
        roi["ac"] = std::vector<int>(subj.rois.ac.begin(), subj.rois.ac.end());
        roi["left"] = std::vector<int>(subj.rois.left.begin(), subj.rois.left.end());
        const std::string roi_rel = "rois/" + sdir + ".json";
        std::ofstream(dir + "/" + roi_rel) << roi.dump(1) << '\n';

        Container gt;
        gt.meta["subject"] = subj.id;
        gt.meta["seed"] = subj.seed;
        gt.sections.push_back({"w_true", subj.w_true, false});
        gt.sections.push_back({"sigma", subj.sigma, false});
        const std::string gt_rel = "ground_truth/" + sdir + ".bin";
        write_container(dir + "/" + gt_rel, gt);

        nlohmann::json resp = nlohmann::json::array();
        for (const StorySpec& s : ds.stories) {
            const Matrix r =
                gen_responses(subj, dataset_teacher_features(ds, s.id), s.id);
            Container c;
            c.meta["subject"] = subj.id;
            c.meta["story"] = s.id;
            c.meta["tr"] = ds.cfg.tr;
            c.sections.push_back({"responses", r, false});
            const std::string rel = "responses/" + sdir + "/" + response_name(s.id);
            write_container(dir + "/" + rel, c);
            const std::string sum = hash_hex(file_checksum(dir + "/" + rel));
            all_sums += sum;
            resp.push_back({{"story", s.id}, {"file", rel}, {"checksum", sum}});
        }
        subjects.push_back({{"id", subj.id},
                            {"roi_file", roi_rel},
                            {"ground_truth", gt_rel},
                            {"responses", resp}});
    }
    manifest["subjects"] = subjects;
    manifest["dataset_checksum"] =
        hash_hex(fnv1a64(all_sums.data(), all_sums.size()));

    std::ofstream(dir + "/manifest.json") << manifest.dump(1) << '\n';
    ds.dir = dir;
}

Dataset make_dataset(const DatasetConfig& cfg, const std::string& dir) {
    Dataset ds = build_dataset(cfg);
    write_dataset(ds, dir);
    return ds;
}

Dataset load_dataset(const std::string& dir) {
    std::ifstream in(dir + "/manifest.json");
    if (!in) throw std::runtime_error("no manifest in " + dir);
    nlohmann::json manifest = nlohmann::json::parse(in);
    if (manifest.value("format", "") != "neuroencode-dataset")
        throw std::runtime_error("not a dataset directory: " + dir);

    Dataset ds;
    ds.cfg = manifest.at("config").get<DatasetConfig>();
    ds.dir = dir;
    ds.split.test = manifest.at("split").at("test").get<std::vector<int>>();
    ds.split.val = manifest.at("split").at("val").get<std::vector<int>>();
    ds.split.train = manifest.at("split").at("train").get<std::vector<int>>();

    for (const auto& js : manifest.at("stories"))
        ds.stories.push_back(make_story_spec(js.at("id").get<int>(),
                                             js.at("duration").get<double>(),
                                             js.at("seed").get<std::uint64_t>(),
                                             ds.cfg.tokens_per_second,
                                             ds.cfg.waveform.vocab_size));

    for (const auto& js : manifest.at("subjects")) {
        SubjectSpec subj;
        subj.id = js.at("id").get<int>();
        std::ifstream rin(dir + "/" + js.at("roi_file").get<std::string>());
        if (!rin) throw std::runtime_error("missing ROI file");
        const nlohmann::json roi = nlohmann::json::parse(rin);
        subj.n_voxels = roi.at("n_voxels").get<Index>();
        const auto ac = roi.at("ac").get<std::vector<int>>();
        const auto left = roi.at("left").get<std::vector<int>>();
        subj.rois.ac.assign(ac.begin(), ac.end());
        subj.rois.left.assign(left.begin(), left.end());
        const Container gt =
            read_container(dir + "/" + js.at("ground_truth").get<std::string>());
        subj.w_true = gt.at("w_true");
        subj.sigma = gt.at("sigma");
        subj.seed = gt.meta.at("seed").get<std::uint64_t>();
        subj.validate();
        ds.subjects.push_back(std::move(subj));
    }
    return ds;
}

Waveform dataset_story_wave(const Dataset& ds, int story_id) {
    if (!ds.dir.empty())
        return read_wav(ds.dir + "/stories/" + story_name(story_id));
    return gen_waveform(ds.stories.at(static_cast<size_t>(story_id)), ds.cfg.waveform);
}

Matrix dataset_responses(const Dataset& ds, int subject_id, int story_id) {
    if (!ds.dir.empty()) {
        const Container c = read_container(ds.dir + "/responses/" +
                                           subject_name(subject_id) + "/" +
                                           response_name(story_id));
        return c.at("responses");
    }
    const EncoderWeights tw = teacher_weights(ds.cfg.teacher);
    const Matrix g = teacher_feature_matrix(
        tw, ds.cfg.teacher, dataset_story_wave(ds, story_id), ds.cfg.tr);
    return gen_responses(ds.subjects.at(static_cast<size_t>(subject_id)), g, story_id);
}

const Matrix& dataset_teacher_features(Dataset& ds, int story_id) {
    if (ds.teacher_feats.empty())
        ds.teacher_feats.resize(ds.stories.size());
    Matrix& slot = ds.teacher_feats.at(static_cast<size_t>(story_id));
    if (slot.size() == 0) {
        const EncoderWeights tw = teacher_weights(ds.cfg.teacher);
        slot = teacher_feature_matrix(tw, ds.cfg.teacher,
                                      dataset_story_wave(ds, story_id), ds.cfg.tr);
    }
    return slot;
}

}  // namespace neuroencode
