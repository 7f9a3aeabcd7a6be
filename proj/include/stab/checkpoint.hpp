#pragma once

// Named parameter tensors with a flat global index space: tensors are
// concatenated in name order, each row-major.

#include <algorithm>
#include <cstddef>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "stab/error.hpp"
#include "stab/io.hpp"
#include "stab/numeric.hpp"

namespace stab {

inline constexpr const char* kCheckpointFormat = "stab-ckpt-v1";

struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> data;

    Tensor() = default;
    Tensor(std::vector<std::size_t> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
        require(data.size() == element_count(shape), "tensor data length does not match shape");
    }
    Tensor(std::vector<std::size_t> s, double fill) : shape(std::move(s)) { data.assign(element_count(shape), fill); }

    static std::size_t element_count(const std::vector<std::size_t>& s) {
        std::size_t n = 1;
        for (std::size_t d : s) n *= d;
        return n;
    }

    std::size_t size() const { return data.size(); }

    /// 2-D view as a matrix; vectors become a single row.
    Matrix as_matrix() const {
        if (shape.size() == 2) return Matrix(shape[0], shape[1], data);
        return Matrix(1, data.size(), data);
    }
};

struct FlatLocation {
    std::string name;
    std::size_t offset = 0;
};

struct Checkpoint {
    std::string format = kCheckpointFormat;
    std::string arch;
    std::size_t class_count = 0;
    std::map<std::string, Tensor> tensors;

    std::size_t total() const {
        std::size_t n = 0;
        for (const auto& [_, t] : tensors) n += t.size();
        return n;
    }

    const Tensor& at(const std::string& name) const {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw InvalidInput("checkpoint has no tensor '" + name + "'");
        return it->second;
    }
    Tensor& at(const std::string& name) {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw InvalidInput("checkpoint has no tensor '" + name + "'");
        return it->second;
    }

    /// Offset of a tensor's first element in the flat index space.
    std::size_t base_offset(const std::string& name) const {
        std::size_t off = 0;
        for (const auto& [n, t] : tensors) {
            if (n == name) return off;
            off += t.size();
        }
        throw InvalidInput("checkpoint has no tensor '" + name + "'");
    }

    FlatLocation locate(std::size_t flat) const {
        std::size_t off = 0;
        for (const auto& [n, t] : tensors) {
            if (flat < off + t.size()) return {n, flat - off};
            off += t.size();
        }
        throw InvalidInput("flat parameter index out of range");
    }

    double& flat(std::size_t i) {
        auto loc = locate(i);
        return tensors.at(loc.name).data[loc.offset];
    }
    double flat(std::size_t i) const {
        auto loc = locate(i);
        return tensors.at(loc.name).data[loc.offset];
    }

    Vector flatten() const {
        Vector out;
        out.reserve(total());
        for (const auto& [_, t] : tensors) out.insert(out.end(), t.data.begin(), t.data.end());
        return out;
    }

    /// Copy of this checkpoint with data replaced from a flat vector of matching length.
    Checkpoint with_flat(std::span<const double> values) const {
        require(values.size() == total(), "flat vector length does not match checkpoint");
        Checkpoint out = *this;
        std::size_t off = 0;
        for (auto& [_, t] : out.tensors) {
            std::copy(values.begin() + static_cast<std::ptrdiff_t>(off),
                      values.begin() + static_cast<std::ptrdiff_t>(off + t.size()), t.data.begin());
            off += t.size();
        }
        return out;
    }

    bool aligned_with(const Checkpoint& o) const {
        if (tensors.size() != o.tensors.size()) return false;
        auto it = o.tensors.begin();
        for (const auto& [n, t] : tensors) {
            if (it->first != n || it->second.shape != t.shape) return false;
            ++it;
        }
        return true;
    }

    void validate() const {
        require(format == kCheckpointFormat, "unsupported checkpoint format '" + format + "'");
        for (const auto& [n, t] : tensors) {
            require(t.data.size() == Tensor::element_count(t.shape), "tensor '" + n + "' has inconsistent shape");
            require(all_finite(t.data), "tensor '" + n + "' has non-finite values");
        }
    }
};

inline void require_aligned(const Checkpoint& a, const Checkpoint& b, const char* what) {
    if (!a.aligned_with(b)) throw InvalidInput(std::string(what) + ": checkpoint shapes are not aligned");
}

/// Elementwise combination of aligned checkpoints; the result keeps a's metadata.
template <class F>
Checkpoint zip_checkpoints(const Checkpoint& a, const Checkpoint& b, F&& f) {
    require_aligned(a, b, "zip_checkpoints");
    Checkpoint out = a;
    auto ib = b.tensors.begin();
    for (auto& [_, t] : out.tensors) {
        const auto& tb = ib->second.data;
        for (std::size_t i = 0; i < t.data.size(); ++i) t.data[i] = f(t.data[i], tb[i]);
        ++ib;
    }
    return out;
}

inline nlohmann::json checkpoint_to_json(const Checkpoint& ck) {
    nlohmann::json j;
    j["format"] = ck.format;
    j["arch"] = ck.arch;
    j["class_count"] = ck.class_count;
    nlohmann::json ts = nlohmann::json::object();
    for (const auto& [n, t] : ck.tensors) ts[n] = {{"shape", t.shape}, {"data", t.data}};
    j["tensors"] = std::move(ts);
    return j;
}

inline Checkpoint checkpoint_from_json(const nlohmann::json& j) {
    Checkpoint ck;
    try {
        ck.format = j.at("format").get<std::string>();
        ck.arch = j.at("arch").get<std::string>();
        ck.class_count = j.at("class_count").get<std::size_t>();
        for (const auto& [n, tj] : j.at("tensors").items()) {
            require(!tj.at("data").is_null(), "tensor '" + n + "' has no data");
            ck.tensors.emplace(n, Tensor(tj.at("shape").get<std::vector<std::size_t>>(),
                                         tj.at("data").get<std::vector<double>>()));
        }
    } catch (const nlohmann::json::exception& e) {
        throw InvalidInput(std::string("malformed checkpoint: ") + e.what());
    }
    ck.validate();
    return ck;
}

inline std::string checkpoint_to_text(const Checkpoint& ck) { return checkpoint_to_json(ck).dump() + "\n"; }

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
    ck.validate();
    io::write_text_atomic(path, checkpoint_to_text(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(io::read_text(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw InvalidInput("cannot parse checkpoint " + path.string() + ": " + e.what());
    }
    return checkpoint_from_json(j);
}

} // namespace stab
