#include "dadm/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

#include "dadm/errors.hpp"

namespace dadm {

namespace {

constexpr const char* kMagic = "DADM1";
constexpr int kVersion = 1;
constexpr std::size_t kMaxHeader = std::size_t{1} << 24;

bool valid_token(const std::string& s) {
    if (s.empty()) return false;
    for (char c : s)
        if (c == ' ' || c == '\n' || c == '\r' || c == '\t') return false;
    return true;
}

}  // namespace

const Tensor& Checkpoint::get(const std::string& name) const {
    for (const auto& [n, t] : tensors)
        if (n == name) return t;
    throw FormatError("checkpoint: missing tensor '" + name + "'");
}

bool Checkpoint::has(const std::string& name) const {
    for (const auto& [n, t] : tensors)
        if (n == name) return true;
    return false;
}

std::string Checkpoint::meta_value(const std::string& key, const std::string& fallback) const {
    for (const auto& [k, v] : meta)
        if (k == key) return v;
    return fallback;
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
    static_assert(std::endian::native == std::endian::little, "little-endian host required");
    std::ostringstream h;
    h << kMagic << '\n' << "version " << kVersion << '\n' << "tensors " << ckpt.tensors.size() << '\n';
    std::size_t payload = 0;
    for (const auto& [name, t] : ckpt.tensors) {
        if (!valid_token(name)) throw FormatError("checkpoint: tensor name '" + name + "' must be a non-empty token");
        h << name << ' ' << t.rank();
        for (std::size_t d : t.shape()) h << ' ' << d;
        h << '\n';
        payload += t.size();
    }
    for (const auto& [k, v] : ckpt.meta) {
        if (!valid_token(k)) throw FormatError("checkpoint: meta key '" + k + "' must be a non-empty token");
        if (v.find('\n') != std::string::npos) throw FormatError("checkpoint: meta value for '" + k + "' spans lines");
        h << "meta " << k << ' ' << v << '\n';
    }
    h << "end\n";
    const std::string head = h.str();
    std::vector<std::uint8_t> out(head.begin(), head.end());
    out.reserve(out.size() + payload * sizeof(double));
    for (const auto& [name, t] : ckpt.tensors) {
        const auto* p = reinterpret_cast<const std::uint8_t*>(t.ptr());
        out.insert(out.end(), p, p + t.size() * sizeof(double));
    }
    return out;
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
    std::size_t pos = 0;
    auto next_line = [&]() -> std::string {
        const std::size_t start = pos;
        while (pos < bytes.size() && bytes[pos] != '\n') {
            if (pos - start > kMaxHeader) throw FormatError("checkpoint: header line too long");
            ++pos;
        }
        if (pos >= bytes.size()) throw FormatError("checkpoint: truncated header");
        std::string line(bytes.begin() + static_cast<std::ptrdiff_t>(start), bytes.begin() + static_cast<std::ptrdiff_t>(pos));
        ++pos;
        return line;
    };
    if (bytes.size() < 6 || std::memcmp(bytes.data(), "DADM1\n", 6) != 0) throw FormatError("checkpoint: bad magic");
    pos = 6;

    auto expect_count = [&](const std::string& key) -> std::size_t {
        std::istringstream ls(next_line());
        std::string k, extra;
        long long v = -1;
        if (!(ls >> k >> v) || k != key || v < 0 || (ls >> extra))
            throw FormatError("checkpoint: malformed '" + key + "' line");
        return static_cast<std::size_t>(v);
    };
    const std::size_t version = expect_count("version");
    if (version != static_cast<std::size_t>(kVersion))
        throw FormatError("checkpoint: unsupported version " + std::to_string(version));
    const std::size_t count = expect_count("tensors");
    if (count > bytes.size()) throw FormatError("checkpoint: tensor count exceeds file size");

    Checkpoint ckpt;
    std::vector<Shape> shapes;
    std::size_t payload = 0;
    for (std::size_t i = 0; i < count; ++i) {
        std::istringstream ls(next_line());
        std::string name, extra;
        long long rank = -1;
        if (!(ls >> name >> rank) || rank < 0 || rank > 8)
            throw FormatError("checkpoint: malformed tensor table entry " + std::to_string(i));
        Shape shape;
        std::size_t elems = 1;
        for (long long r = 0; r < rank; ++r) {
            long long d = -1;
            if (!(ls >> d) || d < 0) throw FormatError("checkpoint: malformed dims for '" + name + "'");
            const auto du = static_cast<std::size_t>(d);
            if (du != 0 && elems > bytes.size() / du) throw FormatError("checkpoint: '" + name + "' exceeds file size");
            elems *= du;
            shape.push_back(du);
        }
        if (ls >> extra) throw FormatError("checkpoint: trailing fields for '" + name + "'");
        payload += elems;
        if (payload > bytes.size()) throw FormatError("checkpoint: shape table exceeds file size");
        ckpt.tensors.emplace_back(name, Tensor());
        shapes.push_back(std::move(shape));
    }
    for (;;) {
        const std::string line = next_line();
        if (line == "end") break;
        if (line.rfind("meta ", 0) != 0) throw FormatError("checkpoint: unexpected header line '" + line + "'");
        const std::string rest = line.substr(5);
        const auto sp = rest.find(' ');
        if (sp == std::string::npos || sp == 0) throw FormatError("checkpoint: malformed meta line");
        ckpt.meta.emplace_back(rest.substr(0, sp), rest.substr(sp + 1));
    }
    const std::size_t remaining = bytes.size() - pos;
    if (remaining != payload * sizeof(double))
        throw FormatError("checkpoint: payload holds " + std::to_string(remaining) + " bytes, table expects " +
                          std::to_string(payload * sizeof(double)));
    for (std::size_t i = 0; i < count; ++i) {
        Tensor t = Tensor::uninitialized(shapes[i]);
        std::memcpy(t.ptr(), bytes.data() + pos, t.size() * sizeof(double));
        pos += t.size() * sizeof(double);
        ckpt.tensors[i].second = std::move(t);
    }
    return ckpt;
}

void write_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    const auto bytes = encode_checkpoint(ckpt);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError("checkpoint: cannot open " + path + " for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw FormatError("checkpoint: write failed for " + path);
}

Checkpoint read_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("checkpoint: cannot open " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return decode_checkpoint(bytes);
}

}  // namespace dadm
