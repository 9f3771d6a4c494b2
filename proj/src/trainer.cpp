#include "canas/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <future>
#include <sstream>
#include <stdexcept>

#include "canas/flops.hpp"
#include "canas/manifest.hpp"

namespace canas {

// ---------------------------------------------------------------------------
// Config file
// ---------------------------------------------------------------------------

namespace {

std::string strip(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::string unquote(const std::string& s) {
    if (s.size() >= 2 && s.front() == '"' && s.back() == '"') return s.substr(1, s.size() - 2);
    return s;
}

std::vector<double> parse_list(const std::string& v, std::size_t line_no) {
    if (v.size() < 2 || v.front() != '[' || v.back() != ']')
        throw std::runtime_error("config line " + std::to_string(line_no) + ": expected [list]");
    std::vector<double> out;
    std::string inner = v.substr(1, v.size() - 2);
    std::replace(inner.begin(), inner.end(), ',', ' ');
    std::istringstream is(inner);
    for (double x; is >> x;) out.push_back(x);
    return out;
}

bool parse_bool(const std::string& v, std::size_t line_no) {
    if (v == "true") return true;
    if (v == "false") return false;
    throw std::runtime_error("config line " + std::to_string(line_no) + ": expected true/false");
}

std::string resolve(const std::string& base_dir, const std::string& path) {
    namespace fs = std::filesystem;
    if (path.empty() || fs::path(path).is_absolute() || base_dir.empty()) return path;
    return (fs::path(base_dir) / path).string();
}

}  // namespace

TrainConfig parse_train_config(const std::string& text, const std::string& base_dir) {
    TrainConfig cfg;
    cfg.raw_text = text;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = strip(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error("config line " + std::to_string(line_no) + ": expected key = value");
        const std::string key = strip(line.substr(0, eq));
        const std::string value = strip(line.substr(eq + 1));
        auto num = [&] { return std::stod(value); };
        if (key == "mode") {
            const std::string m = unquote(value);
            if (m == "sandwich")
                cfg.mode = TrainMode::Sandwich;
            else if (m == "elastic")
                cfg.mode = TrainMode::Elastic;
            else
                throw std::runtime_error("config line " + std::to_string(line_no) + ": unknown mode");
        } else if (key == "space") {
            cfg.space_path = resolve(base_dir, unquote(value));
        } else if (key == "total_steps") {
            cfg.total_steps = static_cast<std::int64_t>(num());
        } else if (key == "batch_size") {
            cfg.batch_size = static_cast<int>(num());
        } else if (key == "num_stochastic") {
            cfg.num_stochastic = static_cast<int>(num());
        } else if (key == "lr") {
            cfg.lr = num();
        } else if (key == "lr_schedule") {
            const std::string s = unquote(value);
            if (s == "constant")
                cfg.lr_schedule = LrScheduleKind::Constant;
            else if (s == "cosine")
                cfg.lr_schedule = LrScheduleKind::Cosine;
            else
                throw std::runtime_error("config line " + std::to_string(line_no) + ": unknown lr_schedule");
        } else if (key == "momentum") {
            cfg.momentum = num();
        } else if (key == "grad_clip") {
            cfg.grad_clip = num();
        } else if (key == "seed") {
            cfg.seed = static_cast<std::uint64_t>(num());
        } else if (key == "ladder") {
            cfg.ladder_levels = parse_list(value, line_no);
        } else if (key == "band") {
            cfg.band = num();
        } else if (key == "hss_targets") {
            cfg.hss_targets = parse_list(value, line_no);
        } else if (key == "q0") {
            cfg.q.q0 = num();
        } else if (key == "q_max") {
            cfg.q.q_max = num();
        } else if (key == "bank_capacity") {
            cfg.bank_capacity = static_cast<std::size_t>(num());
        } else if (key == "checkpoint_every") {
            cfg.checkpoint_every = static_cast<std::int64_t>(num());
        } else if (key == "eval_batch_size") {
            cfg.eval_batch_size = static_cast<int>(num());
        } else if (key == "parallel_subnets") {
            cfg.parallel_subnets = parse_bool(value, line_no);
        } else if (key == "dataset") {
            const std::string d = unquote(value);
            if (d == "synthetic")
                cfg.dataset.kind = DatasetSpec::Kind::Synthetic;
            else {
                cfg.dataset.kind = DatasetSpec::Kind::File;
                cfg.dataset.path = resolve(base_dir, d);
            }
        } else if (key == "data_classes") {
            cfg.dataset.classes = static_cast<int>(num());
        } else if (key == "data_train") {
            cfg.dataset.train_count = static_cast<int>(num());
        } else if (key == "data_eval") {
            cfg.dataset.eval_count = static_cast<int>(num());
        } else if (key == "data_noise") {
            cfg.dataset.noise = num();
        } else if (key == "data_seed") {
            cfg.dataset.seed = static_cast<std::uint64_t>(num());
        } else {
            throw std::runtime_error("config line " + std::to_string(line_no) + ": unknown key '" +
                                     key + "'");
        }
    }
    return cfg;
}

TrainConfig load_train_config(const std::string& path) {
    namespace fs = std::filesystem;
    return parse_train_config(read_file(path), fs::path(path).parent_path().string());
}

std::string serialize(const TrainConfig& c) {
    std::ostringstream os;
    os.precision(17);
    os << "mode = \"" << (c.mode == TrainMode::Elastic ? "elastic" : "sandwich") << "\"\n";
    if (!c.space_path.empty()) os << "space = \"" << c.space_path << "\"\n";
    os << "total_steps = " << c.total_steps << "\n";
    os << "batch_size = " << c.batch_size << "\n";
    os << "num_stochastic = " << c.num_stochastic << "\n";
    os << "lr = " << c.lr << "\n";
    os << "lr_schedule = \"" << (c.lr_schedule == LrScheduleKind::Cosine ? "cosine" : "constant")
       << "\"\n";
    os << "momentum = " << c.momentum << "\n";
    os << "grad_clip = " << c.grad_clip << "\n";
    os << "seed = " << c.seed << "\n";
    auto list = [&](const char* key, const std::vector<double>& v) {
        if (v.empty()) return;
        os << key << " = [";
        for (std::size_t i = 0; i < v.size(); ++i) os << (i ? ", " : "") << v[i];
        os << "]\n";
    };
    list("ladder", c.ladder_levels);
    os << "band = " << c.band << "\n";
    list("hss_targets", c.hss_targets);
    os << "q0 = " << c.q.q0 << "\n";
    os << "q_max = " << c.q.q_max << "\n";
    os << "bank_capacity = " << c.bank_capacity << "\n";
    os << "checkpoint_every = " << c.checkpoint_every << "\n";
    os << "eval_batch_size = " << c.eval_batch_size << "\n";
    os << "parallel_subnets = " << (c.parallel_subnets ? "true" : "false") << "\n";
    if (c.dataset.kind == DatasetSpec::Kind::File)
        os << "dataset = \"" << c.dataset.path << "\"\n";
    else
        os << "dataset = \"synthetic\"\n";
    os << "data_classes = " << c.dataset.classes << "\n";
    os << "data_train = " << c.dataset.train_count << "\n";
    os << "data_eval = " << c.dataset.eval_count << "\n";
    os << "data_noise = " << c.dataset.noise << "\n";
    os << "data_seed = " << c.dataset.seed << "\n";
    return os.str();
}

std::vector<std::string> validate(const TrainConfig& c) {
    std::vector<std::string> errs;
    if (c.space_path.empty()) errs.push_back("space path missing");
    else if (!std::filesystem::exists(c.space_path))
        errs.push_back("space file not found: " + c.space_path);
    if (c.total_steps < 1) errs.push_back("total_steps must be >= 1");
    if (c.batch_size < 1) errs.push_back("batch_size must be >= 1");
    if (c.num_stochastic < 0) errs.push_back("num_stochastic must be >= 0");
    if (!(c.lr > 0)) errs.push_back("lr must be positive");
    if (c.q.q0 < 0 || c.q.q0 > c.q.q_max || c.q.q_max > 1)
        errs.push_back("need 0 <= q0 <= q_max <= 1");
    if (c.bank_capacity < 1) errs.push_back("bank_capacity must be >= 1");
    if (c.mode == TrainMode::Elastic) {
        if (c.ladder_levels.empty()) errs.push_back("elastic mode needs ladder levels");
        if (c.hss_targets.empty()) errs.push_back("elastic mode needs hss_targets");
        ComplexityLadder ladder{c.ladder_levels, c.band};
        for (auto& e : validate(ladder)) errs.push_back("ladder: " + e);
    }
    if (c.dataset.kind == DatasetSpec::Kind::File && !std::filesystem::exists(c.dataset.path))
        errs.push_back("dataset file not found: " + c.dataset.path);
    return errs;
}

// ---------------------------------------------------------------------------
// Records
// ---------------------------------------------------------------------------

nlohmann::json to_json(const StepRecord& r) {
    nlohmann::json subnets = nlohmann::json::array();
    for (const auto& s : r.subnets) {
        nlohmann::json j{{"role", s.role}, {"genome", s.genome}, {"mflops", s.mflops},
                         {"loss", s.loss}};
        if (!s.source.empty()) {
            j["source"] = s.source;
            j["pref_rejections"] = s.pref_rejections;
            j["pref_exhausted"] = s.pref_exhausted;
            j["level_fallback"] = s.level_fallback;
        }
        subnets.push_back(std::move(j));
    }
    nlohmann::json j{{"step", r.step}, {"mode", r.mode}, {"subnets", std::move(subnets)}};
    if (r.mode == "elastic") {
        j["level"] = r.level;
        j["q"] = r.q;
        j["nearest_min"] = r.nearest_min;
    }
    return j;
}

StepRecord step_record_from_json(const nlohmann::json& j) {
    StepRecord r;
    r.step = j.at("step").get<std::int64_t>();
    r.mode = j.at("mode").get<std::string>();
    r.level = j.value("level", -1);
    r.q = j.value("q", 0.0);
    r.nearest_min = j.value("nearest_min", -1);
    for (const auto& s : j.at("subnets")) {
        SubnetRecord sr;
        sr.role = s.at("role").get<std::string>();
        sr.genome = s.at("genome").get<std::vector<int>>();
        sr.mflops = s.at("mflops").get<double>();
        sr.loss = s.at("loss").get<double>();
        sr.source = s.value("source", "");
        sr.pref_rejections = s.value("pref_rejections", 0);
        sr.pref_exhausted = s.value("pref_exhausted", false);
        sr.level_fallback = s.value("level_fallback", false);
        r.subnets.push_back(std::move(sr));
    }
    return r;
}

EvalResult evaluate(const SupernetWeights& weights, const SpaceSpec& space,
                    const SubnetConfig& cfg, const std::vector<Batch>& eval_batches) {
    double loss_sum = 0.0;
    std::int64_t correct = 0, total = 0;
    for (const Batch& base : eval_batches) {
        const Batch batch = resize_batch(base, cfg.resolution);
        const auto out = forward(weights, space, cfg, batch, false);
        loss_sum += cross_entropy(out.logits, batch.labels) * batch.size();
        const int classes = out.logits.shape[1];
        for (int b = 0; b < batch.size(); ++b) {
            const Scalar* row = out.logits.ptr() + static_cast<std::size_t>(b) * classes;
            int arg = 0;
            for (int c = 1; c < classes; ++c)
                if (row[c] > row[arg]) arg = c;
            correct += arg == batch.labels[b];
        }
        total += batch.size();
    }
    EvalResult res;
    res.mean_loss = loss_sum / static_cast<double>(total);
    res.accuracy = static_cast<double>(correct) / static_cast<double>(total);
    return res;
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

namespace {

Dataset make_dataset(const TrainConfig& cfg, const SpaceSpec& space) {
    if (cfg.dataset.kind == DatasetSpec::Kind::File) return Dataset::from_file(cfg.dataset.path);
    return Dataset::synthetic(cfg.dataset, space.in_channels, space.resolutions.back());
}

constexpr std::uint64_t kDataSeedSalt = 0x9e3779b97f4a7c15ULL;
constexpr std::uint64_t kInitSeedSalt = 0xd1b54a32d192ed03ULL;
constexpr std::uint64_t kHssSeedSalt = 0x2545f4914f6cdd1dULL;

}  // namespace

Trainer::Trainer(TrainConfig config) : Trainer(std::move(config), nullptr) {}

Trainer::Trainer(TrainConfig config, const TrainerSnapshot* snap)
    : config_(std::move(config)),
      space_([&] {
          if (snap) return parse_space(snap->space_text);
          return load_space(config_.space_path);
      }()),
      space_text_(snap ? snap->space_text : space_.serialize()),
      dataset_(make_dataset(config_, space_)),
      sampler_rng_(config_.seed),
      data_rng_(config_.seed ^ kDataSeedSalt) {
    {
        const auto errs = canas::validate(space_);
        if (!errs.empty()) throw std::runtime_error("invalid space: " + errs.front());
    }
    {
        auto errs = canas::validate(config_);
        // a snapshot embeds the space text, so the original path may be gone
        if (snap) std::erase_if(errs, [](const std::string& e) { return e.rfind("space", 0) == 0; });
        if (!errs.empty()) throw std::runtime_error("invalid config: " + errs.front());
    }
    ladder_ = ComplexityLadder{config_.ladder_levels, config_.band};
    if (snap) {
        weights_.params = snap->weights;
        if (snap->momentum.size() > 0) opt_.velocity = snap->momentum;
        ladder_state_ = snap->ladder_state;
        sampler_rng_.set_state(snap->sampler_rng);
        data_rng_.set_state(snap->data_rng);
        step_ = snap->step;
        for (std::size_t i = 0; i < snap->hss_genomes.size(); ++i) {
            hss_.subnets.push_back(decode(space_, snap->hss_genomes[i]));
            hss_.mflops.push_back(snap->hss_mflops[i]);
        }
        bank_.reset(ladder_.size(), snap->bank_capacity);
        if (snap->bank_levels.size() != ladder_.size())
            throw std::runtime_error("checkpoint bank does not match the ladder");
        for (std::size_t l = 0; l < snap->bank_levels.size(); ++l)
            for (const auto& [genome, loss, seen] : snap->bank_levels[l])
                bank_.levels()[l].push_back({decode(space_, genome), loss, seen});
    } else {
        RngStream init_rng(config_.seed ^ kInitSeedSalt);
        weights_ = build_supernet(space_, init_rng);
        if (config_.mode == TrainMode::Elastic) {
            RngStream hss_rng(config_.seed ^ kHssSeedSalt);
            hss_ = build_hss(space_, config_.hss_targets, config_.band, hss_rng);
        }
        bank_.reset(ladder_.size(), config_.bank_capacity);
        ladder_state_ = LadderState{0, 0};
    }
}

Trainer Trainer::resume(const std::string& checkpoint_path) {
    const TrainerSnapshot snap = load_checkpoint(checkpoint_path);
    TrainConfig cfg = parse_train_config(snap.config_text, "");
    // the embedded space text is authoritative; the original path may be gone
    if (parse_space(snap.space_text).hash() != snap.space_hash)
        throw std::runtime_error("checkpoint space hash mismatch");
    cfg.space_path.clear();
    TrainConfig patched = std::move(cfg);
    Trainer t(std::move(patched), &snap);
    return t;
}

double Trainer::lr_at(std::int64_t step) const {
    if (config_.lr_schedule == LrScheduleKind::Cosine) {
        const double frac = static_cast<double>(step) / static_cast<double>(config_.total_steps);
        return config_.lr * 0.5 * (1.0 + std::cos(M_PI * frac));
    }
    return config_.lr;
}

void Trainer::train_subnets(const std::vector<SubnetConfig>& cfgs, std::vector<double>& losses) {
    const Batch base = dataset_.train_batch(config_.batch_size, data_rng_);
    losses.assign(cfgs.size(), 0.0);
    std::vector<NamedTensors> grads(cfgs.size());

    auto run_one = [&](std::size_t i) {
        const Batch batch = resize_batch(base, cfgs[i].resolution);
        const auto fwd = forward(weights_, space_, cfgs[i], batch);
        auto bwd = backward(weights_, space_, cfgs[i], *fwd.cache, batch.labels);
        losses[i] = bwd.loss;
        grads[i] = std::move(bwd.grads);
    };

    if (config_.parallel_subnets && cfgs.size() > 1) {
        std::vector<std::future<void>> futures;
        futures.reserve(cfgs.size());
        for (std::size_t i = 0; i < cfgs.size(); ++i)
            futures.push_back(std::async(std::launch::async, run_one, i));
        for (auto& f : futures) f.get();
    } else {
        for (std::size_t i = 0; i < cfgs.size(); ++i) run_one(i);
    }

    // deterministic merge in subnet order, one optimizer update per step
    NamedTensors total = std::move(grads[0]);
    for (std::size_t i = 1; i < grads.size(); ++i) accumulate(total, grads[i]);
    if (config_.grad_clip > 0) {
        double sq = 0;
        for (const Tensor& g : total.tensors)
            for (Scalar v : g.data) sq += v * v;
        const double norm = std::sqrt(sq);
        if (norm > config_.grad_clip) {
            const double scale = config_.grad_clip / norm;
            for (Tensor& g : total.tensors)
                for (Scalar& v : g.data) v *= scale;
        }
    }
    apply_update(weights_, total, opt_, {lr_at(step_), config_.momentum});
}

StepRecord Trainer::step_sandwich() {
    StepRecord rec;
    rec.step = step_;
    rec.mode = "sandwich";
    std::vector<SubnetConfig> cfgs{min_subnet(space_), max_subnet(space_)};
    std::vector<SubnetRecord> meta(2);
    meta[0].role = "min";
    meta[1].role = "max";
    for (int m = 0; m < config_.effective_m(); ++m) {
        cfgs.push_back(sample_uniform(space_, sampler_rng_));
        SubnetRecord sr;
        sr.role = "random";
        meta.push_back(sr);
    }
    for (std::size_t i = 0; i < cfgs.size(); ++i) {
        meta[i].genome = encode(space_, cfgs[i]);
        meta[i].mflops = subnet_mflops(space_, cfgs[i]);
    }
    std::vector<double> losses;
    train_subnets(cfgs, losses);
    for (std::size_t i = 0; i < cfgs.size(); ++i) meta[i].loss = losses[i];
    rec.subnets = std::move(meta);
    step_ += 1;
    return rec;
}

StepRecord Trainer::step_elastic() {
    StepRecord rec;
    rec.step = step_;
    rec.mode = "elastic";

    const std::size_t level = next_level(ladder_, ladder_state_, sampler_rng_);
    rec.level = static_cast<int>(level);
    rec.q = q_at(config_.q, step_, config_.total_steps);
    const std::size_t min_idx = nearest_min_index(hss_, ladder_.levels[level]);
    rec.nearest_min = static_cast<int>(min_idx);

    std::vector<SubnetConfig> cfgs{hss_.subnets[min_idx]};
    std::vector<SubnetRecord> meta(1);
    meta[0].role = "min";
    for (int m = 0; m < config_.effective_m(); ++m) {
        MixtureSample s = sample_mixture(space_, ladder_, level, bank_, rec.q, sampler_rng_);
        SubnetRecord sr;
        sr.role = "stochastic";
        sr.source = s.source == SampleSource::FromBank ? "bank" : "explored";
        sr.pref_rejections = s.pref_rejections;
        sr.pref_exhausted = s.pref_exhausted;
        sr.level_fallback = s.level_fallback;
        cfgs.push_back(std::move(s.cfg));
        meta.push_back(std::move(sr));
    }
    for (std::size_t i = 0; i < cfgs.size(); ++i) {
        meta[i].genome = encode(space_, cfgs[i]);
        meta[i].mflops = subnet_mflops(space_, cfgs[i]);
    }

    std::vector<double> losses;
    train_subnets(cfgs, losses);
    for (std::size_t i = 0; i < cfgs.size(); ++i) meta[i].loss = losses[i];

    // bank updates use the pre-update losses, after the optimizer step
    for (std::size_t i = 1; i < cfgs.size(); ++i)
        if (level_of(meta[i].mflops, ladder_) == level)
            bank_.update(level, cfgs[i], losses[i], step_);

    rec.subnets = std::move(meta);
    step_ += 1;
    return rec;
}

StepRecord Trainer::step() {
    return config_.mode == TrainMode::Elastic ? step_elastic() : step_sandwich();
}

std::vector<Batch> Trainer::eval_batches() const {
    return dataset_.eval_batches(config_.eval_batch_size);
}

TrainerSnapshot Trainer::snapshot() const {
    TrainerSnapshot s;
    s.space_hash = space_.hash();
    s.space_text = space_text_;
    s.config_text = serialize(config_);
    s.step = step_;
    s.weights = weights_.params;
    s.momentum = opt_.velocity;
    s.ladder_state = ladder_state_;
    s.sampler_rng = sampler_rng_.state();
    s.data_rng = data_rng_.state();
    for (std::size_t i = 0; i < hss_.size(); ++i) {
        s.hss_genomes.push_back(encode(space_, hss_.subnets[i]));
        s.hss_mflops.push_back(hss_.mflops[i]);
    }
    s.bank_capacity = bank_.capacity();
    s.bank_levels.resize(bank_.num_levels());
    for (std::size_t l = 0; l < bank_.num_levels(); ++l)
        for (const auto& e : bank_.entries(l))
            s.bank_levels[l].emplace_back(encode(space_, e.cfg), e.loss, e.step_seen);
    return s;
}

void Trainer::save(const std::string& path) const { save_checkpoint(path, snapshot()); }

void Trainer::run(const std::string& out_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    const std::string metrics_path = (fs::path(out_dir) / "metrics.jsonl").string();
    std::ofstream metrics(metrics_path, std::ios::trunc);
    if (!metrics) throw std::runtime_error("cannot write " + metrics_path);

    while (step_ < config_.total_steps) {
        const StepRecord rec = step();
        metrics << to_json(rec).dump() << "\n";
        metrics.flush();
        if (!metrics) throw std::runtime_error("metrics write failed: " + metrics_path);
        if (config_.checkpoint_every > 0 && step_ % config_.checkpoint_every == 0 &&
            step_ < config_.total_steps)
            save((fs::path(out_dir) / ("checkpoint-" + std::to_string(step_) + ".bin")).string());
    }
    save((fs::path(out_dir) / ("checkpoint-" + std::to_string(step_) + ".bin")).string());
}

}  // namespace canas
