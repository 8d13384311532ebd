#pragma once

// Feature stacks, manifests, trial lists and checkpoints on disk.
//
// Feature file (".w2vf"), all little-endian:
//   "W2VF" | u8 version=1 | u8 dtype=0 (f32) | u16 L | u32 N | u32 F   (16 bytes)
//   followed by L*N*F f32 values, layer-major, frame-major within a layer.
//
// Checkpoint (".gpck"):
//   "GPCK" | u32 count | count * (u16 name_len | name | u32 rank | rank * u32 dim | f64 payload)

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "gfusion/error.hpp"
#include "gfusion/matrix.hpp"

namespace gfusion {

namespace fs = std::filesystem;

namespace detail {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename U>
void put_le(std::string& out, U value) {
    static_assert(std::is_unsigned_v<U>);
    for (std::size_t i = 0; i < sizeof(U); ++i) {
        out.push_back(static_cast<char>((value >> (8 * i)) & 0xFF));
    }
}

template <typename U>
U get_le(const unsigned char* p) {
    U value = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
        value |= static_cast<U>(p[i]) << (8 * i);
    }
    return value;
}

inline std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + path.string());
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const fs::path& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot write " + path.string());
    }
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw IoError("short write to " + path.string());
    }
}

/// Sequential little-endian reader over a byte buffer; running past the end
/// is a corruption error.
class ByteReader {
  public:
    ByteReader(const std::string& buf, std::string source) : buf_(buf), source_(std::move(source)) {}

    template <typename U>
    U take() {
        need(sizeof(U));
        U v = get_le<U>(reinterpret_cast<const unsigned char*>(buf_.data()) + pos_);
        pos_ += sizeof(U);
        return v;
    }

    std::string_view bytes(std::size_t n) {
        need(n);
        std::string_view v(buf_.data() + pos_, n);
        pos_ += n;
        return v;
    }

    std::size_t remaining() const { return buf_.size() - pos_; }

  private:
    void need(std::size_t n) const {
        if (buf_.size() - pos_ < n) {
            throw CorruptionError(source_ + ": truncated at byte " + std::to_string(pos_));
        }
    }

    const std::string& buf_;
    std::string source_;
    std::size_t pos_ = 0;
};

} // namespace detail

// ---------------------------------------------------------------------------
// Feature stacks

/// L layers of N frames of F features, stored as f32 exactly as on disk.
struct FeatureStack {
    std::uint32_t layers = 0;
    std::uint32_t frames = 0;
    std::uint32_t dim = 0;
    std::vector<float> values;

    static constexpr std::size_t header_bytes = 16;

    FeatureStack() = default;
    FeatureStack(std::uint32_t l, std::uint32_t n, std::uint32_t f)
        : layers(l), frames(n), dim(f), values(std::size_t(l) * n * f, 0.0f) {}

    std::size_t size() const { return std::size_t(layers) * frames * dim; }

    float& at(std::size_t l, std::size_t n, std::size_t f) { return values[(l * frames + n) * dim + f]; }
    float at(std::size_t l, std::size_t n, std::size_t f) const { return values[(l * frames + n) * dim + f]; }

    /// One layer as an N x F matrix, widened to the working precision.
    template <typename T>
    Matrix<T> layer(std::size_t l) const {
        if (l >= layers) {
            throw ShapeError("layer " + std::to_string(l) + " out of range for " + std::to_string(layers) + " layers");
        }
        Matrix<T> m(frames, dim);
        const float* src = values.data() + l * std::size_t(frames) * dim;
        for (std::size_t i = 0; i < std::size_t(frames) * dim; ++i) {
            m.data()[i] = static_cast<T>(src[i]);
        }
        return m;
    }

    /// Stack built from N x F layers (narrowed to f32).
    template <typename T>
    static FeatureStack from_layers(const std::vector<Matrix<T>>& mats) {
        if (mats.empty()) {
            throw ShapeError("feature stack needs at least one layer");
        }
        FeatureStack s(static_cast<std::uint32_t>(mats.size()), static_cast<std::uint32_t>(mats[0].rows()),
                       static_cast<std::uint32_t>(mats[0].cols()));
        for (std::size_t l = 0; l < mats.size(); ++l) {
            if (mats[l].rows() != mats[0].rows() || mats[l].cols() != mats[0].cols()) {
                throw ShapeError("inconsistent layer shapes in feature stack");
            }
            for (Eigen::Index i = 0; i < mats[l].size(); ++i) {
                s.values[l * std::size_t(s.frames) * s.dim + i] = static_cast<float>(mats[l].data()[i]);
            }
        }
        return s;
    }

    /// Throws DataError/ShapeError if the stack breaks its invariants.
    void validate() const {
        if (layers == 0 || frames == 0 || dim == 0) {
            throw DataError("feature stack dimensions must be >= 1, got L=" + std::to_string(layers) +
                            " N=" + std::to_string(frames) + " F=" + std::to_string(dim));
        }
        if (layers > 0xFFFF) {
            throw DataError("feature stack has " + std::to_string(layers) + " layers; the file format allows 65535");
        }
        if (values.size() != size()) {
            throw ShapeError("feature stack holds " + std::to_string(values.size()) + " values, expected " +
                             std::to_string(size()));
        }
        for (std::size_t i = 0; i < values.size(); ++i) {
            if (!std::isfinite(values[i])) {
                throw DataError("non-finite feature value at flat index " + std::to_string(i));
            }
        }
    }
};

inline std::string encode_feature_stack(const FeatureStack& stack) {
    stack.validate();
    std::string out;
    out.reserve(FeatureStack::header_bytes + 4 * stack.size());
    out.append("W2VF", 4);
    detail::put_le<std::uint8_t>(out, 1);
    detail::put_le<std::uint8_t>(out, 0);
    detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(stack.layers));
    detail::put_le<std::uint32_t>(out, stack.frames);
    detail::put_le<std::uint32_t>(out, stack.dim);
    for (float v : stack.values) {
        detail::put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
    }
    return out;
}

inline FeatureStack decode_feature_stack(const std::string& bytes, const std::string& source = "<buffer>") {
    if (bytes.size() < 4 || std::memcmp(bytes.data(), "W2VF", 4) != 0) {
        throw FormatError(source + ": bad magic, expected W2VF");
    }
    detail::ByteReader rd(bytes, source);
    rd.bytes(4);
    const auto version = rd.take<std::uint8_t>();
    const auto dtype = rd.take<std::uint8_t>();
    if (version != 1) {
        throw FormatError(source + ": unsupported version " + std::to_string(version));
    }
    if (dtype != 0) {
        throw FormatError(source + ": unsupported dtype " + std::to_string(dtype));
    }
    FeatureStack s;
    s.layers = rd.take<std::uint16_t>();
    s.frames = rd.take<std::uint32_t>();
    s.dim = rd.take<std::uint32_t>();
    const std::size_t expected = s.size() * 4;
    if (rd.remaining() != expected) {
        throw CorruptionError(source + ": payload is " + std::to_string(rd.remaining()) + " bytes, header declares " +
                              std::to_string(expected));
    }
    s.values.resize(s.size());
    for (auto& v : s.values) {
        v = std::bit_cast<float>(rd.take<std::uint32_t>());
    }
    if (s.layers == 0 || s.frames == 0 || s.dim == 0) {
        throw DataError(source + ": zero-sized dimension in header");
    }
    for (std::size_t i = 0; i < s.values.size(); ++i) {
        if (!std::isfinite(s.values[i])) {
            throw DataError(source + ": non-finite value at flat index " + std::to_string(i));
        }
    }
    return s;
}

inline FeatureStack read_feature_stack(const fs::path& path) {
    return decode_feature_stack(detail::read_file(path), path.string());
}

/// Returns the number of bytes written.
inline std::size_t write_feature_stack(const FeatureStack& stack, const fs::path& path) {
    const std::string bytes = encode_feature_stack(stack);
    detail::write_file(path, bytes);
    return bytes.size();
}

// ---------------------------------------------------------------------------
// Manifest

struct ManifestEntry {
    std::string utt;
    std::string speaker;
    fs::path path;
    std::uint32_t frames = 0;
};

class Manifest {
  public:
    Manifest() = default;

    /// Entries are validated (unique ids); the class map is rebuilt.
    explicit Manifest(std::vector<ManifestEntry> entries) : entries_(std::move(entries)) { index(); }

    const std::vector<ManifestEntry>& entries() const { return entries_; }
    std::size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }

    bool contains(const std::string& utt) const { return by_utt_.count(utt) != 0; }

    const ManifestEntry& at(const std::string& utt) const {
        auto it = by_utt_.find(utt);
        if (it == by_utt_.end()) {
            throw DataError("unknown utterance id '" + utt + "'");
        }
        return entries_[it->second];
    }

    /// Speaker labels in class-index order (lexicographic).
    const std::vector<std::string>& speakers() const { return speakers_; }
    std::size_t num_classes() const { return speakers_.size(); }

    std::size_t class_of(const std::string& speaker) const {
        auto it = std::lower_bound(speakers_.begin(), speakers_.end(), speaker);
        if (it == speakers_.end() || *it != speaker) {
            throw DataError("unknown speaker '" + speaker + "'");
        }
        return static_cast<std::size_t>(it - speakers_.begin());
    }

    std::size_t class_of_entry(std::size_t i) const { return class_of(entries_[i].speaker); }

  private:
    void index() {
        by_utt_.clear();
        std::set<std::string> labels;
        for (std::size_t i = 0; i < entries_.size(); ++i) {
            if (!by_utt_.emplace(entries_[i].utt, i).second) {
                throw DataError("duplicate utterance id '" + entries_[i].utt + "'");
            }
            labels.insert(entries_[i].speaker);
        }
        speakers_.assign(labels.begin(), labels.end());
    }

    std::vector<ManifestEntry> entries_;
    std::unordered_map<std::string, std::size_t> by_utt_;
    std::vector<std::string> speakers_;
};

/// JSON-lines, one {"utt","speaker","path","frames"} object per line.
/// Relative paths resolve against the manifest's directory; every path must exist.
inline Manifest load_manifest(const fs::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open manifest " + path.string());
    }
    const fs::path base = path.parent_path();
    std::vector<ManifestEntry> entries;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        nlohmann::json obj;
        try {
            obj = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
        ManifestEntry e;
        try {
            e.utt = obj.at("utt").get<std::string>();
            e.speaker = obj.at("speaker").get<std::string>();
            e.path = obj.at("path").get<std::string>();
            e.frames = obj.at("frames").get<std::uint32_t>();
        } catch (const nlohmann::json::exception& ex) {
            throw ParseError(path.string() + ":" + std::to_string(lineno) + ": " + ex.what());
        }
        if (e.path.is_relative()) {
            e.path = base / e.path;
        }
        if (!fs::exists(e.path)) {
            throw IoError(path.string() + ":" + std::to_string(lineno) + ": feature file for '" + e.utt +
                          "' not found: " + e.path.string());
        }
        entries.push_back(std::move(e));
    }
    return Manifest(std::move(entries));
}

/// Paths are written as given (relative paths stay relative).
inline void write_manifest(const Manifest& manifest, const fs::path& path) {
    std::string out;
    for (const auto& e : manifest.entries()) {
        nlohmann::json obj{{"utt", e.utt}, {"speaker", e.speaker}, {"path", e.path.generic_string()}, {"frames", e.frames}};
        out += obj.dump();
        out += '\n';
    }
    detail::write_file(path, out);
}

/// Reads the feature file behind a manifest entry and checks its frame count.
inline FeatureStack read_entry(const ManifestEntry& e) {
    FeatureStack s;
    try {
        s = read_feature_stack(e.path);
    } catch (const IoError&) {
        throw IoError("missing feature file for utterance '" + e.utt + "': " + e.path.string());
    }
    if (s.frames != e.frames) {
        throw DataError("utterance '" + e.utt + "': manifest says " + std::to_string(e.frames) + " frames, file has " +
                        std::to_string(s.frames));
    }
    return s;
}

// ---------------------------------------------------------------------------
// Trials

struct Trial {
    int label = 0;
    std::string enroll;
    std::string test;
};

using TrialList = std::vector<Trial>;

inline TrialList parse_trials(std::istream& in, const Manifest& manifest, const std::string& source = "<trials>") {
    TrialList trials;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::istringstream ss(line);
        std::vector<std::string> tok;
        for (std::string t; ss >> t;) {
            tok.push_back(t);
        }
        if (tok.empty()) {
            continue;
        }
        if (tok.size() != 3) {
            throw ParseError(source + ":" + std::to_string(lineno) + ": expected '<0|1> <enroll> <test>'");
        }
        if (tok[0] != "0" && tok[0] != "1") {
            throw ParseError(source + ":" + std::to_string(lineno) + ": label must be 0 or 1, got '" + tok[0] + "'");
        }
        for (int k : {1, 2}) {
            if (!manifest.contains(tok[k])) {
                throw ReferenceError(source + ": unknown utterance id '" + tok[k] + "'", lineno);
            }
        }
        trials.push_back({tok[0] == "1" ? 1 : 0, tok[1], tok[2]});
    }
    return trials;
}

inline TrialList load_trials(const fs::path& path, const Manifest& manifest) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open trial list " + path.string());
    }
    return parse_trials(in, manifest, path.string());
}

// ---------------------------------------------------------------------------
// Checkpoint tensors

struct NamedTensor {
    std::string name;
    std::vector<std::uint32_t> dims;
    std::vector<double> data;
};

/// Ordered collection of named f64 tensors; the GPCK payload.
class TensorBundle {
  public:
    void put(const std::string& name, std::vector<std::uint32_t> dims, std::vector<double> data) {
        std::size_t n = 1;
        for (auto d : dims) {
            n *= d;
        }
        if (n != data.size()) {
            throw ShapeError("tensor '" + name + "' dims do not match data length");
        }
        if (name.size() > 0xFFFF) {
            throw UsageError("tensor name too long");
        }
        auto it = index_.find(name);
        if (it != index_.end()) {
            tensors_[it->second] = {name, std::move(dims), std::move(data)};
            return;
        }
        index_.emplace(name, tensors_.size());
        tensors_.push_back({name, std::move(dims), std::move(data)});
    }

    template <typename Derived>
    void put_matrix(const std::string& name, const Eigen::MatrixBase<Derived>& m) {
        std::vector<double> data(static_cast<std::size_t>(m.size()));
        for (Eigen::Index r = 0; r < m.rows(); ++r) {
            for (Eigen::Index c = 0; c < m.cols(); ++c) {
                data[r * m.cols() + c] = static_cast<double>(m(r, c));
            }
        }
        put(name, {static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())}, std::move(data));
    }

    void put_scalar(const std::string& name, double v) { put(name, {}, {v}); }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    const NamedTensor& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) {
            throw DataError("checkpoint has no tensor '" + name + "'");
        }
        return tensors_[it->second];
    }

    template <typename T>
    Matrix<T> get_matrix(const std::string& name) const {
        const auto& t = get(name);
        Eigen::Index rows = 1, cols = 1;
        if (t.dims.size() == 2) {
            rows = t.dims[0];
            cols = t.dims[1];
        } else if (t.dims.size() == 1) {
            cols = t.dims[0];
        } else if (!t.dims.empty()) {
            throw ShapeError("tensor '" + name + "' has rank " + std::to_string(t.dims.size()) + ", expected <= 2");
        }
        Matrix<T> m(rows, cols);
        for (Eigen::Index i = 0; i < m.size(); ++i) {
            m.data()[i] = static_cast<T>(t.data[i]);
        }
        return m;
    }

    double get_scalar(const std::string& name) const {
        const auto& t = get(name);
        if (t.data.size() != 1) {
            throw ShapeError("tensor '" + name + "' is not a scalar");
        }
        return t.data[0];
    }

    const std::vector<NamedTensor>& tensors() const { return tensors_; }

  private:
    std::vector<NamedTensor> tensors_;
    std::map<std::string, std::size_t> index_;
};

inline std::string encode_checkpoint(const TensorBundle& bundle) {
    std::string out("GPCK", 4);
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(bundle.tensors().size()));
    for (const auto& t : bundle.tensors()) {
        detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(t.name.size()));
        out += t.name;
        detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.dims.size()));
        for (auto d : t.dims) {
            detail::put_le<std::uint32_t>(out, d);
        }
        for (double v : t.data) {
            detail::put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
        }
    }
    return out;
}

inline TensorBundle decode_checkpoint(const std::string& bytes, const std::string& source = "<buffer>") {
    if (bytes.size() < 4 || std::memcmp(bytes.data(), "GPCK", 4) != 0) {
        throw FormatError(source + ": bad magic, expected GPCK");
    }
    detail::ByteReader rd(bytes, source);
    rd.bytes(4);
    const auto count = rd.take<std::uint32_t>();
    TensorBundle bundle;
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto len = rd.take<std::uint16_t>();
        std::string name(rd.bytes(len));
        const auto rank = rd.take<std::uint32_t>();
        std::vector<std::uint32_t> dims(rank);
        std::size_t n = 1;
        for (auto& d : dims) {
            d = rd.take<std::uint32_t>();
            n *= d;
        }
        if (rd.remaining() / 8 < n) {
            throw CorruptionError(source + ": tensor '" + name + "' payload truncated");
        }
        std::vector<double> data(n);
        for (auto& v : data) {
            v = std::bit_cast<double>(rd.take<std::uint64_t>());
        }
        bundle.put(name, std::move(dims), std::move(data));
    }
    if (rd.remaining() != 0) {
        throw CorruptionError(source + ": " + std::to_string(rd.remaining()) + " trailing bytes");
    }
    return bundle;
}

inline TensorBundle read_checkpoint(const fs::path& path) { return decode_checkpoint(detail::read_file(path), path.string()); }

inline std::size_t write_checkpoint(const TensorBundle& bundle, const fs::path& path) {
    const std::string bytes = encode_checkpoint(bundle);
    detail::write_file(path, bytes);
    return bytes.size();
}

} // namespace gfusion
