#pragma once

#include <cstring>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mmgl/tensor.hpp"

namespace mmgl {

// Parameter checkpoint: text header (names, shapes, dtype) followed by the
// concatenated little-endian f64 blobs in header order. Round-trips bit-exact.
//
//   mmgl-ckpt v1
//   <entry count>
//   <name> <rank> <d0> <d1> ... f64
//   DATA
//   <raw doubles>

using NamedTensorList = std::vector<std::pair<std::string, Tensor>>;

inline std::string checkpoint_bytes(const NamedTensorList& items) {
    std::ostringstream out;
    out << "mmgl-ckpt v1\n" << items.size() << "\n";
    for (const auto& [name, t] : items) {
        if (name.find_first_of(" \n") != std::string::npos)
            throw InvariantError("checkpoint name contains whitespace: " + name);
        out << name << " " << t.shape().size();
        for (auto d : t.shape()) out << " " << d;
        out << " f64\n";
    }
    out << "DATA\n";
    for (const auto& [name, t] : items) {
        (void)name;
        out.write(reinterpret_cast<const char*>(t.value().data()),
                  static_cast<std::streamsize>(t.numel() * sizeof(double)));
    }
    return out.str();
}

inline NamedTensorList parse_checkpoint(const std::string& bytes) {
    std::istringstream in(bytes);
    std::string magic, version;
    in >> magic >> version;
    if (magic != "mmgl-ckpt" || version != "v1") throw InvariantError("bad checkpoint header");
    std::size_t count = 0;
    in >> count;
    NamedTensorList items;
    items.reserve(count);
    std::vector<std::size_t> numels;
    for (std::size_t i = 0; i < count; ++i) {
        std::string name;
        std::size_t rank = 0;
        in >> name >> rank;
        Shape shape(rank);
        for (auto& d : shape) in >> d;
        std::string dtype;
        in >> dtype;
        if (dtype != "f64") throw InvariantError("unsupported checkpoint dtype: " + dtype);
        numels.push_back(shape_numel(shape));
        items.emplace_back(name, Tensor::zeros(std::move(shape)));
    }
    std::string marker;
    in >> marker;
    if (marker != "DATA") throw InvariantError("checkpoint missing DATA marker");
    in.get();  // newline after DATA
    for (std::size_t i = 0; i < count; ++i) {
        auto& t = items[i].second;
        in.read(reinterpret_cast<char*>(t.value().data()),
                static_cast<std::streamsize>(numels[i] * sizeof(double)));
        if (static_cast<std::size_t>(in.gcount()) != numels[i] * sizeof(double))
            throw InvariantError("checkpoint truncated at entry " + items[i].first);
    }
    return items;
}

inline void save_checkpoint(const std::filesystem::path& path, const NamedTensorList& items) {
    const std::string bytes = checkpoint_bytes(items);
    write_binary_file(path, bytes.data(), bytes.size());
}

inline NamedTensorList load_checkpoint(const std::filesystem::path& path) {
    const auto buf = read_binary_file(path);
    return parse_checkpoint(std::string(buf.data(), buf.size()));
}

// Copies values from a checkpoint into existing tensors; names and shapes
// must match exactly.
inline void restore_into(const NamedTensorList& loaded, const NamedTensorList& targets) {
    if (loaded.size() != targets.size()) throw InvariantError("checkpoint entry count mismatch");
    for (std::size_t i = 0; i < targets.size(); ++i) {
        if (loaded[i].first != targets[i].first)
            throw InvariantError("checkpoint name mismatch: " + loaded[i].first + " vs " + targets[i].first);
        if (loaded[i].second.shape() != targets[i].second.shape())
            throw InvariantError("checkpoint shape mismatch for " + loaded[i].first);
        const_cast<Tensor&>(targets[i].second).value() = loaded[i].second.value();
    }
}

inline std::uint64_t checkpoint_checksum(const NamedTensorList& items) {
    const std::string bytes = checkpoint_bytes(items);
    return fnv1a(bytes.data(), bytes.size());
}

}  // namespace mmgl
