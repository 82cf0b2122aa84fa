#include "dadm/harness.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include <json.hpp>
#include <spdlog/spdlog.h>

#include "dadm/errors.hpp"

namespace dadm {

namespace {

std::string fmt_real(double v) {
    char buf[64];
    auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, p);
}

template <class T>
std::string join(const std::vector<T>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += ",";
        if constexpr (std::is_floating_point_v<T>) out += fmt_real(v[i]);
        else out += std::to_string(v[i]);
    }
    return out;
}

int modality_index(const std::string& name) {
    for (std::size_t m = 0; m < 3; ++m)
        if (name == kModalityNames[m]) return static_cast<int>(m);
    throw ConfigError("config: unknown modality '" + name + "' (expected rgb, depth or ir)");
}

template <class E>
E pick(const std::string& key, const std::string& value, std::initializer_list<std::pair<const char*, E>> options) {
    std::string allowed;
    for (const auto& [name, e] : options) {
        if (value == name) return e;
        allowed += std::string(allowed.empty() ? "" : ", ") + name;
    }
    throw ConfigError("config: '" + key + "' must be one of " + allowed + ", got '" + value + "'");
}

std::vector<int> to_ints(const std::vector<long>& v) { return {v.begin(), v.end()}; }

std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

Presence keep_mask(const ProtocolConfig& cfg) {
    Presence keep{true, true, true};
    if (cfg.protocol == Protocol::missing)
        for (int m : cfg.missing) keep[static_cast<std::size_t>(m)] = false;
    return keep;
}

std::vector<int> labels_of(const Dataset& data, const std::vector<std::size_t>& idx) {
    std::vector<int> out;
    out.reserve(idx.size());
    for (std::size_t i : idx) out.push_back(data[i].label);
    return out;
}

constexpr std::uint64_t kSplitStream = 0x73706c6974ULL;
constexpr std::uint64_t kValDropStream = 0x76616cULL;
constexpr std::uint64_t kTestDropStream = 0x74657374ULL;

/// Test-time scores under the protocol's presence policy.
std::vector<double> score_under(const ProtocolConfig& cfg, const DadmModel& model, const Dataset& data,
                                const std::vector<std::size_t>& idx, std::uint64_t stream) {
    if (cfg.protocol == Protocol::flexible) {
        Rng drop(cfg.seed, stream);
        return score_records(model, data, idx, {true, true, true}, cfg.drop_prob, &drop);
    }
    return score_records(model, data, idx, keep_mask(cfg));
}

}  // namespace

const char* protocol_name(Protocol p) {
    switch (p) {
        case Protocol::fixed: return "fixed";
        case Protocol::missing: return "missing";
        case Protocol::flexible: return "flexible";
        case Protocol::limited: return "limited";
    }
    return "?";
}

ProtocolConfig ProtocolConfig::parse(const KeyValues& kv) {
    ProtocolConfig c;
    c.protocol = pick<Protocol>("protocol", kv.str("protocol", "fixed"),
                                {{"fixed", Protocol::fixed},
                                 {"missing", Protocol::missing},
                                 {"flexible", Protocol::flexible},
                                 {"limited", Protocol::limited}});
    c.test_envs = to_ints(kv.integers("test_envs", {3}));
    c.source_envs = to_ints(kv.integers("source_envs", {}));
    c.missing.clear();
    if (kv.has("missing")) {
        std::string list = kv.str("missing", "");
        std::size_t start = 0;
        while (start <= list.size()) {
            const std::size_t comma = std::min(list.find(',', start), list.size());
            std::string item = list.substr(start, comma - start);
            item.erase(0, item.find_first_not_of(' '));
            item.erase(item.find_last_not_of(' ') + 1);
            if (!item.empty()) c.missing.push_back(modality_index(item));
            start = comma + 1;
        }
    }
    c.drop_prob = kv.real("drop_prob", c.drop_prob);
    c.val_fraction = kv.real("val_fraction", c.val_fraction);
    c.seed = static_cast<std::uint64_t>(kv.integer("seed", static_cast<long>(c.seed)));

    ModelConfig& m = c.model;
    m.layers = static_cast<std::size_t>(kv.integer("layers", static_cast<long>(m.layers)));
    m.dim = static_cast<std::size_t>(kv.integer("dim", static_cast<long>(m.dim)));
    m.fused_dim = static_cast<std::size_t>(kv.integer("fused_dim", static_cast<long>(m.fused_dim)));
    m.patch = static_cast<std::size_t>(kv.integer("patch", static_cast<long>(m.patch)));
    m.mlp_ratio = static_cast<std::size_t>(kv.integer("mlp_ratio", static_cast<long>(m.mlp_ratio)));
    m.image_h = static_cast<std::size_t>(kv.integer("image_h", static_cast<long>(m.image_h)));
    m.image_w = static_cast<std::size_t>(kv.integer("image_w", static_cast<long>(m.image_w)));
    m.cdc_theta = kv.real("cdc_theta", m.cdc_theta);
    m.adapter = kv.boolean("adapter", m.adapter);
    m.freeze_backbone = kv.boolean("freeze_backbone", m.freeze_backbone);
    m.act = pick<nn::Activation>("activation", kv.str("activation", "gelu"),
                                 {{"gelu", nn::Activation::gelu}, {"relu", nn::Activation::relu}});
    m.use_mim = kv.boolean("use_mim", m.use_mim);
    m.merge = pick<MimMerge>("mim_merge", kv.str("mim_merge", "replace"),
                             {{"replace", MimMerge::replace}, {"additive", MimMerge::additive}});
    m.mim_fuse_theta = kv.real("mim_fuse_theta", m.mim_fuse_theta);
    m.regrad = kv.boolean("regrad", m.regrad);
    m.regrad_scope = pick<ReGradScope>("regrad_scope", kv.str("regrad_scope", "per_sample"),
                                       {{"per_sample", ReGradScope::per_sample}, {"batch", ReGradScope::batch}});
    m.substitute = pick<SubstituteMode>("substitute", kv.str("substitute", "zero"),
                                        {{"zero", SubstituteMode::zero}, {"learnable", SubstituteMode::learnable}});

    TrainConfig& t = c.train;
    t.epochs = static_cast<int>(kv.integer("epochs", t.epochs));
    t.batch = static_cast<std::size_t>(kv.integer("batch", static_cast<long>(t.batch)));
    t.optimizer = pick<OptimizerKind>("optimizer", kv.str("optimizer", "adam"),
                                      {{"adam", OptimizerKind::adam}, {"sgd", OptimizerKind::sgd}});
    t.lr = kv.real("lr", t.lr);
    t.weight_decay = kv.real("weight_decay", t.weight_decay);
    t.weights.lambda_mi = kv.real("lambda_mi", t.weights.lambda_mi);
    t.weights.lambda_angle = kv.real("lambda_angle", t.weights.lambda_angle);
    t.angle.tau_live = kv.real("tau_live", t.angle.tau_live);
    t.angle.tau_spoof = kv.real("tau_spoof", t.angle.tau_spoof);
    t.pgirm.alpha = kv.real("alpha", t.pgirm.alpha);
    t.pgirm.t_alpha = static_cast<int>(kv.integer("t_alpha", t.pgirm.t_alpha));
    t.pgirm.lr = kv.real("beta_lr", t.pgirm.lr);
    kv.require_all_used();

    m.seed = c.seed;
    t.seed = c.seed;
    t.pgirm.epochs = t.epochs;
    c.validate();
    return c;
}

ProtocolConfig ProtocolConfig::parse_text(const std::string& text) { return parse(KeyValues::parse(text)); }
ProtocolConfig ProtocolConfig::load(const std::string& path) { return parse(KeyValues::load(path)); }

std::string ProtocolConfig::echo() const {
    std::map<std::string, std::string> kv;
    kv["protocol"] = protocol_name(protocol);
    kv["test_envs"] = join(test_envs);
    if (!source_envs.empty()) kv["source_envs"] = join(source_envs);
    if (!missing.empty()) {
        std::string names;
        for (std::size_t i = 0; i < missing.size(); ++i)
            names += std::string(i ? "," : "") + kModalityNames[static_cast<std::size_t>(missing[i])];
        kv["missing"] = names;
    }
    kv["drop_prob"] = fmt_real(drop_prob);
    kv["val_fraction"] = fmt_real(val_fraction);
    kv["seed"] = std::to_string(seed);
    kv["layers"] = std::to_string(model.layers);
    kv["dim"] = std::to_string(model.dim);
    kv["fused_dim"] = std::to_string(model.fused_dim);
    kv["patch"] = std::to_string(model.patch);
    kv["mlp_ratio"] = std::to_string(model.mlp_ratio);
    kv["image_h"] = std::to_string(model.image_h);
    kv["image_w"] = std::to_string(model.image_w);
    kv["cdc_theta"] = fmt_real(model.cdc_theta);
    kv["adapter"] = model.adapter ? "true" : "false";
    kv["freeze_backbone"] = model.freeze_backbone ? "true" : "false";
    kv["activation"] = model.act == nn::Activation::gelu ? "gelu" : "relu";
    kv["use_mim"] = model.use_mim ? "true" : "false";
    kv["mim_merge"] = model.merge == MimMerge::replace ? "replace" : "additive";
    kv["mim_fuse_theta"] = fmt_real(model.mim_fuse_theta);
    kv["regrad"] = model.regrad ? "true" : "false";
    kv["regrad_scope"] = model.regrad_scope == ReGradScope::per_sample ? "per_sample" : "batch";
    kv["substitute"] = model.substitute == SubstituteMode::zero ? "zero" : "learnable";
    kv["epochs"] = std::to_string(train.epochs);
    kv["batch"] = std::to_string(train.batch);
    kv["optimizer"] = train.optimizer == OptimizerKind::adam ? "adam" : "sgd";
    kv["lr"] = fmt_real(train.lr);
    kv["weight_decay"] = fmt_real(train.weight_decay);
    kv["lambda_mi"] = fmt_real(train.weights.lambda_mi);
    kv["lambda_angle"] = fmt_real(train.weights.lambda_angle);
    kv["tau_live"] = fmt_real(train.angle.tau_live);
    kv["tau_spoof"] = fmt_real(train.angle.tau_spoof);
    kv["alpha"] = fmt_real(train.pgirm.alpha);
    kv["t_alpha"] = std::to_string(train.pgirm.t_alpha);
    kv["beta_lr"] = fmt_real(train.pgirm.lr);
    std::string out;
    for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
    return out;
}

std::string ProtocolConfig::run_id() const {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a(echo())));
    return buf;
}

void ProtocolConfig::validate() const {
    if (test_envs.empty()) throw ConfigError("config: at least one test environment is required");
    if (!(drop_prob >= 0.0 && drop_prob <= 1.0)) throw ConfigError("config: drop_prob outside [0, 1]");
    if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw ConfigError("config: val_fraction must lie in (0, 1)");
    if (protocol == Protocol::missing && missing.empty())
        throw ConfigError("config: the missing protocol needs at least one modality in 'missing'");
    if (protocol == Protocol::missing && missing.size() >= 3)
        throw ConfigError("config: the missing protocol must keep at least one modality");
    if (protocol != Protocol::missing && !missing.empty())
        throw ConfigError("config: 'missing' applies to the missing protocol only");
    if (protocol == Protocol::limited && source_envs.empty())
        throw ConfigError("config: the limited protocol needs 'source_envs'");
    for (int e : source_envs)
        if (std::find(test_envs.begin(), test_envs.end(), e) != test_envs.end())
            throw ConfigError("config: environment " + std::to_string(e) + " is both source and test");
    model.validate();
    TrainConfig t = train;
    t.pgirm.epochs = t.epochs;
    t.validate();
}

Split make_split(const ProtocolConfig& cfg, const Dataset& data) {
    std::set<int> present;
    for (const auto& r : data) present.insert(r.env);
    for (int e : cfg.test_envs)
        if (!present.count(e)) throw ConfigError("config: test environment " + std::to_string(e) + " not in dataset");
    for (int e : cfg.source_envs)
        if (!present.count(e)) throw ConfigError("config: source environment " + std::to_string(e) + " not in dataset");
    Split s;
    if (!cfg.source_envs.empty()) {
        s.source_envs = cfg.source_envs;
        std::sort(s.source_envs.begin(), s.source_envs.end());
        if (cfg.protocol != Protocol::limited) {
            std::vector<int> all;
            for (int e : present)
                if (std::find(cfg.test_envs.begin(), cfg.test_envs.end(), e) == cfg.test_envs.end()) all.push_back(e);
            if (all != s.source_envs)
                throw ConfigError("config: only the limited protocol may restrict the source environments");
        }
    } else {
        for (int e : present)
            if (std::find(cfg.test_envs.begin(), cfg.test_envs.end(), e) == cfg.test_envs.end())
                s.source_envs.push_back(e);
    }
    if (s.source_envs.empty()) throw ConfigError("config: no source environments left for training");

    // Per (environment, label) group, a seeded shuffle decides validation rows.
    std::map<std::pair<int, int>, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < data.size(); ++i) {
        const int e = data[i].env;
        if (std::find(cfg.test_envs.begin(), cfg.test_envs.end(), e) != cfg.test_envs.end()) s.test.push_back(i);
        else if (std::find(s.source_envs.begin(), s.source_envs.end(), e) != s.source_envs.end())
            groups[{e, data[i].label}].push_back(i);
    }
    const Rng root(cfg.seed, kSplitStream);
    for (auto& [key, idx] : groups) {
        Rng r = root.fork(static_cast<std::uint64_t>(key.first) * 2 + static_cast<std::uint64_t>(key.second));
        const auto perm = r.permutation(idx.size());
        const auto n_val = static_cast<std::size_t>(cfg.val_fraction * static_cast<double>(idx.size()) + 0.5);
        for (std::size_t k = 0; k < idx.size(); ++k) (k < n_val ? s.val : s.train).push_back(idx[perm[k]]);
    }
    std::sort(s.train.begin(), s.train.end());
    std::sort(s.val.begin(), s.val.end());
    return s;
}

std::string epoch_json(const std::string& run_id, const EpochRecord& e) {
    nlohmann::json j;
    j["run_id"] = run_id;
    j["epoch"] = e.stats.epoch;
    j["batches"] = e.stats.batches;
    j["ce"] = e.stats.ce;
    j["mi"] = e.stats.mi;
    j["angle"] = e.stats.angle;
    j["total"] = e.stats.total;
    j["beta_max_distance"] = e.stats.beta_max_distance;
    j["val_auc"] = e.val_auc;
    j["val_hter"] = e.val_hter;
    j["regrad_branches"] = std::vector<long>(e.stats.branch_counts.begin() + 1, e.stats.branch_counts.end());
    j["regrad_degenerate"] = e.stats.degenerate;
    return j.dump();
}

std::string report_json(const MetricsReport& r) {
    nlohmann::json j;
    j["run_id"] = r.run_id;
    j["seed"] = r.seed;
    j["protocol"] = r.protocol;
    j["auc"] = r.test.auc;
    j["hter"] = r.test.hter;
    j["far"] = r.test.far;
    j["frr"] = r.test.frr;
    j["threshold"] = r.test.threshold;
    j["threshold_policy"] = "min HTER on source validation split";
    j["eer_test_diagnostic"] = r.test.eer;
    j["val_auc"] = r.val_auc;
    j["best_epoch"] = r.best_epoch;
    j["wall_seconds"] = r.wall_seconds;
    j["config"] = r.config_echo;
    nlohmann::json roc = nlohmann::json::array();
    for (const auto& p : r.test.roc)
        roc.push_back({p.far, p.frr, std::isfinite(p.threshold) ? nlohmann::json(p.threshold) : nlohmann::json("inf")});
    j["roc_far_frr_threshold"] = roc;
    nlohmann::json curves = nlohmann::json::array();
    for (const auto& e : r.epochs)
        curves.push_back({{"epoch", e.stats.epoch},
                          {"ce", e.stats.ce},
                          {"mi", e.stats.mi},
                          {"angle", e.stats.angle},
                          {"total", e.stats.total},
                          {"val_auc", e.val_auc}});
    j["epochs"] = curves;
    return j.dump(2);
}

RunOutput run_protocol(const ProtocolConfig& cfg_in, const Dataset& data, const std::string& run_dir) {
    const auto t0 = std::chrono::steady_clock::now();
    ProtocolConfig cfg = cfg_in;
    cfg.model.seed = cfg.seed;
    cfg.train.seed = cfg.seed;
    cfg.train.pgirm.epochs = cfg.train.epochs;
    if (cfg.protocol == Protocol::flexible) cfg.model.substitute = SubstituteMode::learnable;
    cfg.validate();
    if (data.empty()) throw ConfigError("run: empty dataset");
    for (const auto& r : data)
        if (static_cast<std::size_t>(r.height) != cfg.model.image_h || static_cast<std::size_t>(r.width) != cfg.model.image_w)
            throw ConfigError("run: dataset images are " + std::to_string(r.height) + "x" + std::to_string(r.width) +
                              ", config expects " + std::to_string(cfg.model.image_h) + "x" +
                              std::to_string(cfg.model.image_w));

    const Split split = make_split(cfg, data);
    const std::string run_id = cfg.run_id();
    TrainConfig tc = cfg.train;
    tc.drop_prob = cfg.protocol == Protocol::flexible ? cfg.drop_prob : 0.0;

    DadmModel model(cfg.model, split.source_envs);
    Trainer trainer(model, tc);

    std::ofstream log;
    if (!run_dir.empty()) {
        std::filesystem::create_directories(run_dir);
        std::ofstream(run_dir + "/config.txt") << cfg.echo();
        log.open(run_dir + "/log.jsonl", std::ios::trunc);
        if (!log) throw ConfigError("run: cannot write " + run_dir + "/log.jsonl");
    }

    const auto val_labels = labels_of(data, split.val);
    const auto test_labels = labels_of(data, split.test);
    RunOutput out;
    MetricsReport& rep = out.report;
    rep.run_id = run_id;
    rep.seed = cfg.seed;
    rep.protocol = protocol_name(cfg.protocol);
    rep.config_echo = cfg.echo();
    double best_threshold = 0.0;
    for (int ep = 1; ep <= tc.epochs; ++ep) {
        EpochRecord rec;
        rec.stats = trainer.train_epoch(data, split.train, ep);
        if (rec.stats.degenerate > 0)
            spdlog::warn("run {}: epoch {}: {} ReGrad projections had a zero-norm gradient, used g1 + g2", run_id, ep,
                         rec.stats.degenerate);
        const auto val_scores = score_under(cfg, model, data, split.val, kValDropStream);
        const Metrics vm = compute_metrics(val_scores, val_labels);
        rec.val_auc = vm.auc;
        rec.val_hter = vm.hter;
        if (ep == 1 || rec.val_auc > rep.val_auc) {
            rep.val_auc = rec.val_auc;
            rep.best_epoch = ep;
            best_threshold = vm.threshold;
            out.best = model.to_checkpoint();
        }
        rep.epochs.push_back(rec);
        if (log) log << epoch_json(run_id, rec) << "\n" << std::flush;
        spdlog::debug("run {} epoch {} ce {:.4f} mi {:.4f} angle {:.4f} val_auc {:.4f}", run_id, ep, rec.stats.ce,
                      rec.stats.mi, rec.stats.angle, rec.val_auc);
    }

    model.load_checkpoint(out.best);
    const auto test_scores = score_under(cfg, model, data, split.test, kTestDropStream);
    rep.test = compute_metrics(test_scores, test_labels, best_threshold);

    const KeyValues kv = KeyValues::parse(cfg.echo());
    for (const auto& [k, v] : kv.entries()) out.best.meta.emplace_back("cfg." + k, v);
    out.best.meta.emplace_back("threshold", fmt_real(best_threshold));
    out.best.meta.emplace_back("best_epoch", std::to_string(rep.best_epoch));
    out.best.meta.emplace_back("val_auc", fmt_real(rep.val_auc));
    out.best.meta.emplace_back("run_id", run_id);

    rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!run_dir.empty()) {
        write_checkpoint(out.best, run_dir + "/best.ckpt");
        std::ofstream(run_dir + "/report.json") << report_json(rep) << "\n";
    }
    return out;
}

ProtocolConfig config_from_checkpoint(const Checkpoint& ckpt) {
    std::string text;
    for (const auto& [k, v] : ckpt.meta)
        if (k.rfind("cfg.", 0) == 0) text += k.substr(4) + " = " + v + "\n";
    if (text.empty()) throw FormatError("checkpoint: no training configuration stored");
    return ProtocolConfig::parse_text(text);
}

MetricsReport evaluate_checkpoint(const Checkpoint& ckpt, const ProtocolConfig& cfg_in, const Dataset& data) {
    const auto t0 = std::chrono::steady_clock::now();
    ProtocolConfig cfg = cfg_in;
    if (cfg.protocol == Protocol::flexible) cfg.model.substitute = SubstituteMode::learnable;
    cfg.validate();
    const Split split = make_split(cfg, data);
    std::vector<int> envs;
    const std::string stored = ckpt.meta_value("train_envs");
    for (std::size_t start = 0; start < stored.size();) {
        const std::size_t comma = std::min(stored.find(',', start), stored.size());
        envs.push_back(std::stoi(stored.substr(start, comma - start)));
        start = comma + 1;
    }
    if (envs.empty()) throw FormatError("checkpoint: no training environments stored");
    DadmModel model(cfg.model, envs);
    model.load_checkpoint(ckpt);
    const std::string thr = ckpt.meta_value("threshold");
    if (thr.empty()) throw FormatError("checkpoint: no decision threshold stored");
    double threshold = 0.0;
    if (std::from_chars(thr.data(), thr.data() + thr.size(), threshold).ec != std::errc())
        throw FormatError("checkpoint: malformed threshold '" + thr + "'");

    MetricsReport rep;
    rep.run_id = ckpt.meta_value("run_id");
    rep.seed = cfg.seed;
    rep.protocol = protocol_name(cfg.protocol);
    rep.config_echo = cfg.echo();
    rep.best_epoch = std::atoi(ckpt.meta_value("best_epoch", "0").c_str());
    rep.val_auc = std::atof(ckpt.meta_value("val_auc", "0").c_str());
    const auto scores = score_under(cfg, model, data, split.test, kTestDropStream);
    rep.test = compute_metrics(scores, labels_of(data, split.test), threshold);
    rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return rep;
}

}  // namespace dadm
