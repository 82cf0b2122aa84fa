#include "dadm/synth.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

#include "dadm/errors.hpp"
#include "dadm/kvconfig.hpp"
#include "dadm/rng.hpp"

namespace dadm {

namespace {

constexpr char kMagic[7] = {'D', 'A', 'D', 'M', 'D', 'S', '1'};
constexpr std::uint8_t kVersion = 1;
constexpr int kMaxFreq = 3;
constexpr std::size_t kRecordHeaderBytes = 4 + 1 + 4 + 1 + 4 + 4;

using Field = std::vector<double>;  // (3, H, W)

/// 1-D cos/sin basis for frequencies 0..kMaxFreq, shape (2*(kMaxFreq+1), n).
std::vector<double> basis_1d(int n) {
    const int nb = 2 * (kMaxFreq + 1);
    std::vector<double> b(static_cast<std::size_t>(nb * n));
    for (int f = 0; f <= kMaxFreq; ++f)
        for (int i = 0; i < n; ++i) {
            const double a = 2.0 * std::numbers::pi * f * i / n;
            b[static_cast<std::size_t>((2 * f) * n + i)] = std::cos(a);
            b[static_cast<std::size_t>((2 * f + 1) * n + i)] = std::sin(a);
        }
    return b;
}

struct FieldSampler {
    int h, w;
    std::vector<double> by, bx;

    FieldSampler(int height, int width) : h(height), w(width), by(basis_1d(height)), bx(basis_1d(width)) {}

    /// Smooth zero-DC random field with unit RMS over all three channels.
    Field sample(Rng& rng) const {
        const int nb = 2 * (kMaxFreq + 1);
        Field out(static_cast<std::size_t>(3 * h * w), 0.0);
        std::vector<double> coef(static_cast<std::size_t>(nb * nb));
        std::vector<double> tmp(static_cast<std::size_t>(nb * w));
        for (int c = 0; c < 3; ++c) {
            for (auto& v : coef) v = rng.normal();
            coef[0] = 0.0;  // cos0 x cos0 is the DC term
            // tmp(p, x) = sum_q coef(p, q) bx(q, x)
            std::fill(tmp.begin(), tmp.end(), 0.0);
            for (int p = 0; p < nb; ++p)
                for (int q = 0; q < nb; ++q) {
                    const double k = coef[static_cast<std::size_t>(p * nb + q)];
                    for (int x = 0; x < w; ++x) tmp[static_cast<std::size_t>(p * w + x)] += k * bx[static_cast<std::size_t>(q * w + x)];
                }
            double* dst = out.data() + static_cast<std::size_t>(c * h * w);
            for (int p = 0; p < nb; ++p)
                for (int y = 0; y < h; ++y) {
                    const double k = by[static_cast<std::size_t>(p * h + y)];
                    for (int x = 0; x < w; ++x) dst[y * w + x] += k * tmp[static_cast<std::size_t>(p * w + x)];
                }
        }
        double ss = 0.0;
        for (double v : out) ss += v * v;
        const double rms = std::sqrt(ss / static_cast<double>(out.size()));
        for (auto& v : out) v /= rms;
        return out;
    }
};

void box_blur(Field& f, int h, int w, int radius) {
    if (radius <= 0) return;
    Field tmp(f.size());
    auto clampi = [](int v, int lo, int hi) { return v < lo ? lo : (v > hi ? hi : v); };
    const double norm = 1.0 / (2 * radius + 1);
    for (int c = 0; c < 3; ++c) {
        double* src = f.data() + static_cast<std::size_t>(c * h * w);
        double* t = tmp.data() + static_cast<std::size_t>(c * h * w);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                double s = 0.0;
                for (int d = -radius; d <= radius; ++d) s += src[y * w + clampi(x + d, 0, w - 1)];
                t[y * w + x] = s * norm;
            }
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                double s = 0.0;
                for (int d = -radius; d <= radius; ++d) s += t[clampi(y + d, 0, h - 1) * w + x];
                src[y * w + x] = s * norm;
            }
    }
}

int pick_attack(const EnvShift& shift, std::size_t n_attacks, Rng& rng) {
    if (shift.attack_mix.empty()) return static_cast<int>(rng.below(n_attacks));
    double total = 0.0;
    for (double v : shift.attack_mix) total += v;
    double u = rng.uniform() * total;
    for (std::size_t a = 0; a < shift.attack_mix.size(); ++a) {
        if (u < shift.attack_mix[a]) return static_cast<int>(a);
        u -= shift.attack_mix[a];
    }
    // Rounding can leave u marginally past the last bucket.
    for (std::size_t a = shift.attack_mix.size(); a-- > 0;)
        if (shift.attack_mix[a] > 0.0) return static_cast<int>(a);
    return 0;
}

template <class T>
void put(std::vector<std::uint8_t>& out, T v) {
    static_assert(std::endian::native == std::endian::little, "little-endian host required");
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    out.insert(out.end(), p, p + sizeof(T));
}

class Reader {
public:
    explicit Reader(const std::vector<std::uint8_t>& b) : bytes_(b) {}
    template <class T>
    T get(const char* what) {
        need(sizeof(T), what);
        T v;
        std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    void need(std::size_t n, const char* what) const {
        if (bytes_.size() - pos_ < n) throw FormatError(std::string("dataset: truncated ") + what);
    }
    const std::uint8_t* take(std::size_t n, const char* what) {
        need(n, what);
        const std::uint8_t* p = bytes_.data() + pos_;
        pos_ += n;
        return p;
    }
    std::size_t remaining() const { return bytes_.size() - pos_; }

private:
    const std::vector<std::uint8_t>& bytes_;
    std::size_t pos_ = 0;
};

std::array<double, 3> triple(const KeyValues& kv, const std::string& key, std::array<double, 3> fallback) {
    const auto v = kv.reals(key, {fallback.begin(), fallback.end()});
    if (v.size() != 3) throw ConfigError("synth spec: '" + key + "' needs three values");
    return {v[0], v[1], v[2]};
}

}  // namespace

SynthSpec SynthSpec::defaults() {
    SynthSpec s;
    s.attacks = {
        {"print", {0.6, 1.0, 0.9}},
        {"replay", {0.7, 0.9, 0.5}},
        {"mask3d", {0.9, 0.1, 0.8}},
    };
    s.shifts.resize(4);
    s.shifts[0] = {{1.0, 1.0, 1.0}, {0.0, 0.0, 0.0}, 0, 0.10, {}, 0.0};
    s.shifts[1] = {{1.3, 0.8, 1.1}, {0.2, -0.1, 0.0}, 1, 0.15, {}, 0.0};
    s.shifts[2] = {{0.7, 1.2, 0.9}, {-0.2, 0.1, 0.2}, 0, 0.25, {}, 0.0};
    s.shifts[3] = {{1.1, 1.0, 0.6}, {0.1, 0.3, -0.2}, 1, 0.20, {}, 0.0};
    // Each environment favours different attacks, and the per-modality
    // nuisance outweighs the planted template, so cross-modal consistency
    // carries most of the live signal.
    s.shifts[0].attack_mix = {1.0, 0.0, 0.05};
    s.shifts[1].attack_mix = {0.0, 1.0, 0.05};
    s.shifts[2].attack_mix = {0.5, 0.5, 0.05};
    s.shifts[3].attack_mix = {0.1, 0.1, 0.8};
    s.pattern = 0.2;
    s.shared = 1.0;
    s.nuisance = 1.5;
    return s;
}

void SynthSpec::validate() const {
    if (n_envs < 1) throw ConfigError("synth spec: n_envs must be >= 1");
    if (samples_per_env < 1) throw ConfigError("synth spec: zero samples requested");
    if (height < 1 || width < 1) throw ConfigError("synth spec: image size must be positive");
    if (attacks.empty()) throw ConfigError("synth spec: at least one attack type is required");
    for (const auto& a : attacks)
        for (double r : a.reliability)
            if (!(r >= 0.0 && r <= 1.0))
                throw ConfigError("synth spec: reliability of '" + a.name + "' outside [0, 1]");
    if (!shifts.empty() && static_cast<int>(shifts.size()) != n_envs)
        throw ConfigError("synth spec: shifts must list one entry per environment");
    for (const auto& s : shifts) {
        if (s.blur_radius < 0) throw ConfigError("synth spec: negative blur radius");
        if (!(s.noise >= 0.0)) throw ConfigError("synth spec: negative noise");
        if (!s.attack_mix.empty()) {
            if (s.attack_mix.size() != attacks.size())
                throw ConfigError("synth spec: attack mix must list one weight per attack");
            double total = 0.0;
            for (double v : s.attack_mix) {
                if (!(v >= 0.0)) throw ConfigError("synth spec: negative attack mix weight");
                total += v;
            }
            if (!(total > 0.0)) throw ConfigError("synth spec: attack mix sums to zero");
        }
    }
    if (!(live_ratio >= 0.0 && live_ratio <= 1.0)) throw ConfigError("synth spec: live_ratio outside [0, 1]");
    if (!(pattern >= 0.0 && shared >= 0.0 && nuisance >= 0.0))
        throw ConfigError("synth spec: amplitudes must be non-negative");
}

Dataset generate(const SynthSpec& spec) {
    spec.validate();
    const int h = spec.height, w = spec.width;
    const std::size_t plane = static_cast<std::size_t>(3 * h * w);
    const FieldSampler sampler(h, w);
    const Rng root(spec.seed);

    Rng template_rng = root.fork(1);
    const Field tmpl = sampler.sample(template_rng);

    const std::size_t n = static_cast<std::size_t>(spec.samples_per_env);
    const std::size_t n_live = static_cast<std::size_t>(std::llround(spec.live_ratio * static_cast<double>(n)));

    Dataset data;
    data.reserve(n * static_cast<std::size_t>(spec.n_envs));
    for (int e = 0; e < spec.n_envs; ++e) {
        const EnvShift shift = spec.shifts.empty() ? EnvShift{} : spec.shifts[static_cast<std::size_t>(e)];
        Rng env_rng = root.fork(1000 + static_cast<std::uint64_t>(e));
        const auto order = env_rng.permutation(n);
        for (std::size_t i = 0; i < n; ++i) {
            Rng rng = root.fork((static_cast<std::uint64_t>(e + 1) << 32) + i);
            Record rec;
            rec.env = e;
            rec.label = order[i] < n_live ? 1 : 0;
            rec.attack = rec.label == 1 ? -1 : pick_attack(shift, spec.attacks.size(), rng);
            rec.height = h;
            rec.width = w;

            const double amp = spec.pattern * rng.uniform(0.75, 1.25);
            const Field shared = sampler.sample(rng);
            for (int m = 0; m < 3; ++m) {
                const Field nuis = sampler.sample(rng);
                const double r = rec.label == 1 ? 0.0 : spec.attacks[static_cast<std::size_t>(rec.attack)].reliability[static_cast<std::size_t>(m)];
                Field x(plane);
                if (r > 0.0) {
                    const Field fake = sampler.sample(rng);
                    for (std::size_t k = 0; k < plane; ++k)
                        x[k] = (1.0 - r) * (amp * tmpl[k] + spec.shared * shared[k]) + r * amp * fake[k] +
                               spec.nuisance * nuis[k];
                } else {
                    for (std::size_t k = 0; k < plane; ++k)
                        x[k] = amp * tmpl[k] + spec.shared * shared[k] + spec.nuisance * nuis[k];
                }

                box_blur(x, h, w, shift.blur_radius);
                const double cue = m == 2 ? (rec.label == 1 ? shift.cue : -shift.cue) : 0.0;
                auto& img = rec.images[static_cast<std::size_t>(m)];
                img.resize(plane);
                for (std::size_t k = 0; k < plane; ++k) {
                    double v = shift.gain[static_cast<std::size_t>(m)] * x[k] + shift.bias[static_cast<std::size_t>(m)] + cue;
                    if (shift.noise > 0.0) v += shift.noise * rng.normal();
                    img[k] = static_cast<float>(v);
                }
            }
            data.push_back(std::move(rec));
        }
    }
    return data;
}

std::vector<std::uint8_t> encode_dataset(const Dataset& data) {
    std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
    out.push_back(kVersion);
    put<std::uint64_t>(out, data.size());
    for (const auto& r : data) {
        const std::size_t plane = static_cast<std::size_t>(3 * r.height * r.width);
        for (const auto& img : r.images)
            if (img.size() != plane) throw FormatError("dataset: record image size does not match its header");
        put<std::int32_t>(out, r.env);
        put<std::uint8_t>(out, static_cast<std::uint8_t>(r.label));
        put<std::int32_t>(out, r.attack);
        put<std::uint8_t>(out, r.presence);
        put<std::uint32_t>(out, static_cast<std::uint32_t>(r.height));
        put<std::uint32_t>(out, static_cast<std::uint32_t>(r.width));
        for (const auto& img : r.images) {
            const auto* p = reinterpret_cast<const std::uint8_t*>(img.data());
            out.insert(out.end(), p, p + img.size() * sizeof(float));
        }
    }
    return out;
}

Dataset decode_dataset(const std::vector<std::uint8_t>& bytes) {
    Reader in(bytes);
    const std::uint8_t* magic = in.take(sizeof(kMagic), "magic");
    if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw FormatError("dataset: bad magic");
    const auto version = in.get<std::uint8_t>("version");
    if (version != kVersion) throw FormatError("dataset: unsupported version " + std::to_string(version));
    const auto count = in.get<std::uint64_t>("record count");
    if (count > in.remaining() / kRecordHeaderBytes) throw FormatError("dataset: record count exceeds file size");
    Dataset data;
    data.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        Record r;
        r.env = in.get<std::int32_t>("record header");
        const auto label = in.get<std::uint8_t>("record header");
        r.attack = in.get<std::int32_t>("record header");
        r.presence = in.get<std::uint8_t>("record header");
        const auto hh = in.get<std::uint32_t>("record header");
        const auto ww = in.get<std::uint32_t>("record header");
        if (label > 1) throw FormatError("dataset: record " + std::to_string(i) + " has invalid label");
        if (r.presence > 0b111) throw FormatError("dataset: record " + std::to_string(i) + " has invalid presence bits");
        if (r.env < 0 || r.attack < -1 || (label == 1) != (r.attack == -1))
            throw FormatError("dataset: record " + std::to_string(i) + " has inconsistent env/label/attack");
        if (hh == 0 || ww == 0 || hh > 4096 || ww > 4096)
            throw FormatError("dataset: record " + std::to_string(i) + " has invalid image size");
        r.label = label;
        r.height = static_cast<int>(hh);
        r.width = static_cast<int>(ww);
        const std::size_t plane = 3ull * hh * ww;
        for (auto& img : r.images) {
            const std::uint8_t* p = in.take(plane * sizeof(float), "image payload");
            img.resize(plane);
            std::memcpy(img.data(), p, plane * sizeof(float));
        }
        data.push_back(std::move(r));
    }
    if (in.remaining() != 0) throw FormatError("dataset: trailing bytes after last record");
    return data;
}

void write_dataset(const Dataset& data, const std::string& path) {
    const auto bytes = encode_dataset(data);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError("dataset: cannot open " + path + " for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw FormatError("dataset: write failed for " + path);
}

Dataset read_dataset(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("dataset: cannot open " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return decode_dataset(bytes);
}

SynthSpec parse_synth_spec(const std::string& text) {
    const KeyValues kv = KeyValues::parse(text);
    SynthSpec s = SynthSpec::defaults();
    s.n_envs = static_cast<int>(kv.integer("n_envs", s.n_envs));
    s.samples_per_env = static_cast<int>(kv.integer("samples_per_env", s.samples_per_env));
    s.height = static_cast<int>(kv.integer("height", s.height));
    s.width = static_cast<int>(kv.integer("width", s.width));
    s.live_ratio = kv.real("live_ratio", s.live_ratio);
    s.pattern = kv.real("pattern", s.pattern);
    s.shared = kv.real("shared", s.shared);
    s.nuisance = kv.real("nuisance", s.nuisance);
    s.seed = static_cast<std::uint64_t>(kv.integer("seed", static_cast<long>(s.seed)));

    bool custom_attacks = false;
    for (const auto& [key, value] : kv.entries())
        if (key.rfind("attack.", 0) == 0) custom_attacks = true;
    if (custom_attacks) {
        s.attacks.clear();
        for (const auto& [key, value] : kv.entries())
            if (key.rfind("attack.", 0) == 0) s.attacks.push_back({key.substr(7), triple(kv, key, {1, 1, 1})});
    }

    if (static_cast<int>(s.shifts.size()) != s.n_envs) s.shifts.assign(static_cast<std::size_t>(std::max(s.n_envs, 0)), EnvShift{});
    for (int e = 0; e < s.n_envs; ++e) {
        auto& sh = s.shifts[static_cast<std::size_t>(e)];
        const std::string p = "env" + std::to_string(e) + ".";
        sh.gain = triple(kv, p + "gain", sh.gain);
        sh.bias = triple(kv, p + "bias", sh.bias);
        sh.blur_radius = static_cast<int>(kv.integer(p + "blur", sh.blur_radius));
        sh.noise = kv.real(p + "noise", sh.noise);
        sh.attack_mix = kv.reals(p + "mix", sh.attack_mix);
        sh.cue = kv.real(p + "cue", sh.cue);
    }
    kv.require_all_used();
    s.validate();
    return s;
}

SynthSpec load_synth_spec(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("synth spec: cannot open " + path);
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return parse_synth_spec(text);
}

Tensor stack_modality(const Dataset& data, const std::vector<std::size_t>& idx, int modality) {
    if (modality < 0 || modality > 2) throw ShapeError("stack_modality: modality must be 0, 1 or 2");
    if (idx.empty()) throw ShapeError("stack_modality: empty selection");
    const Record& first = data.at(idx.front());
    const std::size_t h = static_cast<std::size_t>(first.height), w = static_cast<std::size_t>(first.width);
    const std::size_t plane = 3 * h * w;
    Tensor out = Tensor::uninitialized({idx.size(), 3, h, w});
    double* dst = out.ptr();
    for (std::size_t b = 0; b < idx.size(); ++b) {
        const Record& r = data.at(idx[b]);
        if (static_cast<std::size_t>(r.height) != h || static_cast<std::size_t>(r.width) != w)
            throw ShapeError("stack_modality: records differ in image size");
        const auto& img = r.images[static_cast<std::size_t>(modality)];
        for (std::size_t k = 0; k < plane; ++k) dst[b * plane + k] = img[k];
    }
    return out;
}

}  // namespace dadm
