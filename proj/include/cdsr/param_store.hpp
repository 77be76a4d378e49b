#pragma once

#include "cdsr/autograd.hpp"
#include "cdsr/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace cdsr {

/// Named parameter tensors keyed by dotted names ("base.enc0.conv1.weight").
/// Iteration order is lexicographic by name.
class ParamStore {
public:
    using Map = std::map<std::string, Tensor>;

    /// Throws FormatError on duplicate names.
    void add(const std::string& name, Tensor value);
    void set(const std::string& name, Tensor value);
    bool contains(const std::string& name) const { return entries_.count(name) != 0; }
    const Tensor& get(const std::string& name) const;
    Tensor& get_mut(const std::string& name);
    void erase(const std::string& name) { entries_.erase(name); }

    std::size_t size() const noexcept { return entries_.size(); }
    std::size_t numel() const noexcept;
    std::vector<std::string> names() const;
    std::vector<std::string> names_with_prefix(std::string_view prefix) const;

    Map::const_iterator begin() const noexcept { return entries_.begin(); }
    Map::const_iterator end() const noexcept { return entries_.end(); }
    Map::iterator begin() noexcept { return entries_.begin(); }
    Map::iterator end() noexcept { return entries_.end(); }

    /// Same names, shapes and bitwise-identical payloads.
    friend bool operator==(const ParamStore& a, const ParamStore& b) noexcept { return a.entries_ == b.entries_; }

private:
    Map entries_;
};

/// Fills `store` with a freshly initialised tensor per (name, shape):
/// ".weight" gets Kaiming-uniform (bound sqrt(6 / fan_in)), ".gamma" ones,
/// everything else zeros. Names listed in `zero_init` are zeroed regardless.
/// Each tensor draws from a stream keyed by (seed, name), so a parameter's
/// initial value does not depend on which other parameters exist.
void init_params(ParamStore& store, const std::vector<std::pair<std::string, Shape>>& specs, std::uint64_t seed,
                 const std::vector<std::string>& zero_init = {});

/// Writes the binary checkpoint: magic "CDSH", u32 version 1, u32 count,
/// per tensor {u16 name length, name bytes, u8 rank, u32 dims, u8 dtype 0,
/// little-endian f32 payload}, then a CRC32 of all preceding bytes.
void save_checkpoint(const ParamStore& params, const std::filesystem::path& path);
ParamStore load_checkpoint(const std::filesystem::path& path);

/// In-memory form of the checkpoint format, exposed for corruption tests.
std::vector<std::uint8_t> encode_checkpoint(const ParamStore& params);
ParamStore decode_checkpoint(const std::vector<std::uint8_t>& bytes);
/// CRC32 (zlib polynomial) as stored in the checkpoint trailer.
std::uint32_t checkpoint_crc32(const std::vector<std::uint8_t>& bytes);

/// Per-forward-pass view that turns store entries into autograd leaves.
/// With `trainable` set, gradients accumulate and can be collected after
/// ag::backward.
class ParamBinding {
public:
    ParamBinding(const ParamStore& store, bool trainable) : store_(&store), trainable_(trainable) {}

    ag::Var operator()(const std::string& name);
    bool contains(const std::string& name) const { return store_->contains(name); }
    bool trainable() const noexcept { return trainable_; }
    const ParamStore& store() const noexcept { return *store_; }

    /// Gradient for every store entry (zeros where nothing flowed).
    ParamStore gradients() const;
    /// Names actually read during the forward pass.
    std::vector<std::string> touched() const;

private:
    const ParamStore* store_;
    bool trainable_;
    std::map<std::string, ag::Var> vars_;
};

} // namespace cdsr
