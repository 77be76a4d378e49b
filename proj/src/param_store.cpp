#include "cdsr/param_store.hpp"

#include "cdsr/errors.hpp"
#include "cdsr/rng.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>

namespace cdsr {

void ParamStore::add(const std::string& name, Tensor value) {
    if (!entries_.emplace(name, std::move(value)).second) {
        throw FormatError("duplicate parameter name: " + name);
    }
}

void ParamStore::set(const std::string& name, Tensor value) { entries_[name] = std::move(value); }

const Tensor& ParamStore::get(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ShapeError("missing parameter: " + name);
    return it->second;
}

Tensor& ParamStore::get_mut(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ShapeError("missing parameter: " + name);
    return it->second;
}

std::size_t ParamStore::numel() const noexcept {
    std::size_t n = 0;
    for (const auto& [_, t] : entries_) n += t.size();
    return n;
}

std::vector<std::string> ParamStore::names() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& [name, _] : entries_) out.push_back(name);
    return out;
}

std::vector<std::string> ParamStore::names_with_prefix(std::string_view prefix) const {
    std::vector<std::string> out;
    for (const auto& [name, _] : entries_) {
        if (std::string_view(name).substr(0, prefix.size()) == prefix) out.push_back(name);
    }
    return out;
}

void init_params(ParamStore& store, const std::vector<std::pair<std::string, Shape>>& specs, std::uint64_t seed,
                 const std::vector<std::string>& zero_init) {
    const std::set<std::string> zeros(zero_init.begin(), zero_init.end());
    auto ends_with = [](const std::string& s, std::string_view suffix) {
        return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
    };
    for (const auto& [name, shape] : specs) {
        Tensor t(shape);
        if (zeros.count(name)) {
            // stays zero
        } else if (ends_with(name, ".weight")) {
            const std::size_t fan_in = shape.size() > 1 ? shape_numel(shape) / shape[0] : shape_numel(shape);
            const double bound = std::sqrt(6.0 / static_cast<double>(std::max<std::size_t>(fan_in, 1)));
            Rng rng = Rng::derive(seed, {hash_name(name)});
            for (float& v : t.values()) v = static_cast<float>(rng.uniform(-bound, bound));
        } else if (ends_with(name, ".gamma")) {
            t.fill(1.0f);
        }
        store.add(name, std::move(t));
    }
}

namespace {

constexpr char kMagic[4] = {'C', 'D', 'S', 'H'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::vector<std::uint8_t>& out, T v) {
    static_assert(std::is_integral_v<T>);
    for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
public:
    Reader(const std::vector<std::uint8_t>& b, std::size_t end) : bytes_(b), end_(end) {}

    template <typename T>
    T get() {
        need(sizeof(T));
        T v = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<T>(bytes_[pos_ + i]) << (8 * i));
        pos_ += sizeof(T);
        return v;
    }
    std::string str(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    const std::uint8_t* take(std::size_t n) {
        need(n);
        const std::uint8_t* p = bytes_.data() + pos_;
        pos_ += n;
        return p;
    }
    std::size_t pos() const noexcept { return pos_; }

private:
    void need(std::size_t n) const {
        if (pos_ + n > end_) throw FormatError("checkpoint truncated");
    }
    const std::vector<std::uint8_t>& bytes_;
    std::size_t end_;
    std::size_t pos_ = 0;
};

std::uint32_t crc32_of(const std::uint8_t* p, std::size_t n) {
    return static_cast<std::uint32_t>(::crc32(::crc32(0L, Z_NULL, 0), p, static_cast<uInt>(n)));
}

} // namespace

std::uint32_t checkpoint_crc32(const std::vector<std::uint8_t>& bytes) { return crc32_of(bytes.data(), bytes.size()); }

std::vector<std::uint8_t> encode_checkpoint(const ParamStore& params) {
    static_assert(std::endian::native == std::endian::little, "checkpoint writer assumes little-endian floats");
    std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
    put<std::uint32_t>(out, kVersion);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
    for (const auto& [name, t] : params) {
        if (name.size() > 0xFFFF) throw FormatError("parameter name too long: " + name.substr(0, 32));
        if (t.rank() > 255) throw FormatError("tensor rank too large: " + name);
        put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
        out.insert(out.end(), name.begin(), name.end());
        out.push_back(static_cast<std::uint8_t>(t.rank()));
        for (int d : t.shape()) put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
        out.push_back(0); // dtype f32
        const auto* raw = reinterpret_cast<const std::uint8_t*>(t.data());
        out.insert(out.end(), raw, raw + t.size() * sizeof(float));
    }
    put<std::uint32_t>(out, crc32_of(out.data(), out.size()));
    return out;
}

ParamStore decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < 16) throw FormatError("checkpoint truncated");
    if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("not a checkpoint (bad magic)");
    const std::size_t body = bytes.size() - 4;
    Reader tail(bytes, bytes.size());
    tail.take(body);
    const auto stored_crc = tail.get<std::uint32_t>();

    Reader r(bytes, body);
    r.take(4);
    const auto version = r.get<std::uint32_t>();
    if (version != kVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
    if (crc32_of(bytes.data(), body) != stored_crc) throw FormatError("checkpoint checksum mismatch");
    const auto count = r.get<std::uint32_t>();
    ParamStore store;
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto len = r.get<std::uint16_t>();
        std::string name = r.str(len);
        const auto rank = r.get<std::uint8_t>();
        Shape shape(rank);
        for (auto& d : shape) {
            const auto v = r.get<std::uint32_t>();
            if (v > 0x7FFFFFFFu) throw FormatError("dimension too large in " + name);
            d = static_cast<int>(v);
        }
        const auto dtype = r.get<std::uint8_t>();
        if (dtype != 0) throw FormatError("unsupported dtype code " + std::to_string(dtype) + " for " + name);
        Tensor t(shape);
        const std::uint8_t* p = r.take(t.size() * sizeof(float));
        std::memcpy(t.data(), p, t.size() * sizeof(float));
        if (store.contains(name)) throw FormatError("duplicate tensor name in checkpoint: " + name);
        store.add(name, std::move(t));
    }
    if (r.pos() != body) throw FormatError("trailing bytes after last tensor");
    return store;
}

void save_checkpoint(const ParamStore& params, const std::filesystem::path& path) {
    const auto bytes = encode_checkpoint(params);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed: " + path.string());
}

ParamStore load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("checkpoint not found: " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    try {
        return decode_checkpoint(bytes);
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

ag::Var ParamBinding::operator()(const std::string& name) {
    auto it = vars_.find(name);
    if (it != vars_.end()) return it->second;
    const Tensor& t = store_->get(name);
    ag::Var v = trainable_ ? ag::Var::parameter(t) : ag::Var::constant(t);
    vars_.emplace(name, v);
    return v;
}

ParamStore ParamBinding::gradients() const {
    ParamStore out;
    for (const auto& [name, t] : *store_) {
        auto it = vars_.find(name);
        if (it != vars_.end() && !it->second.grad().empty()) {
            out.add(name, it->second.grad());
        } else {
            out.add(name, Tensor(t.shape()));
        }
    }
    return out;
}

std::vector<std::string> ParamBinding::touched() const {
    std::vector<std::string> out;
    for (const auto& [name, _] : vars_) out.push_back(name);
    return out;
}

} // namespace cdsr
