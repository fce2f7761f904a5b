#pragma once

// Checkpoint directory layout:
//   manifest.json  mode, vocab symbols in order, hidden/output dims, and a tensor
//                  list (name, shape, dtype, byte offset into weights.bin)
//   weights.bin    little-endian float64 tensors, row-major, concatenated in
//                  manifest order
// Files are written to a temporary name and renamed into place.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "isan/model.hpp"

namespace isan {

struct Checkpoint {
  ModelParams params;
  std::optional<Matrix> basis;  // change of basis the params were expressed in
};

namespace detail {

struct TensorRecord {
  std::string name;
  std::vector<Index> shape;
  Matrix value;  // rows x cols; 1-D tensors are a single column
};

inline void put_f64_le(std::string& out, double v) {
  auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

inline double get_f64_le(const unsigned char* p) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

inline std::vector<TensorRecord> tensor_records(const ModelParams& p,
                                                const std::optional<Matrix>& basis) {
  const Index n = p.hidden_dim();
  std::vector<TensorRecord> recs;
  if (p.mode == Mode::shared) {
    recs.push_back({"transition.W", {n, n}, p.W.front()});
  } else {
    for (std::size_t i = 0; i < p.W.size(); ++i)
      recs.push_back({"transition.W." + std::to_string(i), {n, n}, p.W[i]});
  }
  recs.push_back({"transition.b", {p.vocab.size(), n}, p.B.transpose()});
  recs.push_back({"h0", {n}, p.h0});
  recs.push_back({"readout.W", {p.output_dim(), n}, p.readout.W});
  recs.push_back({"readout.b", {p.output_dim()}, p.readout.b});
  if (basis) recs.push_back({"basis.T", {basis->rows(), basis->cols()}, *basis});
  return recs;
}

inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& dir, const ModelParams& p,
                            const std::optional<Matrix>& basis = std::nullopt) {
  p.validate();
  std::filesystem::create_directories(dir);
  std::string blob;
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& rec : detail::tensor_records(p, basis)) {
    tensors.push_back({{"name", rec.name},
                       {"shape", rec.shape},
                       {"dtype", "float64"},
                       {"offset", blob.size()}});
    // row-major
    for (Index r = 0; r < rec.value.rows(); ++r)
      for (Index c = 0; c < rec.value.cols(); ++c) detail::put_f64_le(blob, rec.value(r, c));
  }
  std::vector<std::string> vocab;
  for (char c : p.vocab.symbols()) vocab.emplace_back(1, c);
  nlohmann::json manifest = {{"format", "isan-checkpoint"},
                             {"version", 1},
                             {"mode", to_string(p.mode)},
                             {"vocab", vocab},
                             {"hidden_dim", p.hidden_dim()},
                             {"output_dim", p.output_dim()},
                             {"tensors", tensors}};
  if (basis) manifest["basis"] = "basis.T";
  detail::write_file_atomic(dir / "weights.bin", blob);
  detail::write_file_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
}

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(detail::read_file(dir / "manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("manifest", e.what());
  }
  const std::string blob = detail::read_file(dir / "weights.bin");

  Checkpoint ck;
  try {
    std::string symbols;
    for (const auto& s : manifest.at("vocab")) {
      const auto str = s.get<std::string>();
      if (str.size() != 1) throw FormatError("manifest", "vocab symbols must be single bytes");
      symbols += str;
    }
    const Index n = manifest.at("hidden_dim").get<Index>();
    const Index m = manifest.at("output_dim").get<Index>();
    const Mode mode = parse_mode(manifest.at("mode").get<std::string>());
    ck.params = ModelParams::zeros(Vocab(symbols), n, m, mode);
    std::optional<Matrix> basis_shape;
    if (manifest.contains("basis")) basis_shape = Matrix();

    const auto expected = detail::tensor_records(ck.params, std::nullopt);
    const auto& listed = manifest.at("tensors");
    auto find = [&](const std::string& name) -> const nlohmann::json& {
      for (const auto& t : listed)
        if (t.at("name").get<std::string>() == name) return t;
      throw FormatError(name, "missing from manifest");
    };
    auto read_tensor = [&](const nlohmann::json& t, Index rows, Index cols) {
      const std::string name = t.at("name").get<std::string>();
      if (t.at("dtype").get<std::string>() != "float64") throw FormatError(name, "dtype must be float64");
      const auto offset = t.at("offset").get<std::size_t>();
      const auto bytes = static_cast<std::size_t>(rows * cols) * 8;
      if (offset + bytes > blob.size()) throw FormatError(name, "extends past end of weights.bin");
      Matrix out(rows, cols);
      const auto* base = reinterpret_cast<const unsigned char*>(blob.data()) + offset;
      for (Index r = 0; r < rows; ++r)
        for (Index c = 0; c < cols; ++c)
          out(r, c) = detail::get_f64_le(base + 8 * static_cast<std::size_t>(r * cols + c));
      return out;
    };
    auto read_expected = [&](const detail::TensorRecord& rec) {
      const auto& t = find(rec.name);
      const auto shape = t.at("shape").get<std::vector<Index>>();
      if (shape != rec.shape) {
        std::string want, got;
        for (auto d : rec.shape) want += std::to_string(d) + " ";
        for (auto d : shape) got += std::to_string(d) + " ";
        throw FormatError(rec.name, "shape mismatch: expected [ " + want + "], got [ " + got + "]");
      }
      return read_tensor(t, rec.value.rows(), rec.value.cols());
    };

    auto& p = ck.params;
    std::size_t idx = 0;
    for (auto& w : p.W) w = read_expected(expected[idx++]);
    p.B = read_expected(expected[idx++]).transpose();
    p.h0 = read_expected(expected[idx++]);
    p.readout.W = read_expected(expected[idx++]);
    p.readout.b = read_expected(expected[idx++]);
    if (basis_shape) {
      const auto& t = find(manifest.at("basis").get<std::string>());
      const auto shape = t.at("shape").get<std::vector<Index>>();
      if (shape.size() != 2 || shape[0] != shape[1]) throw FormatError("basis.T", "basis must be square");
      ck.basis = read_tensor(t, shape[0], shape[1]);
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("manifest", e.what());
  }
  ck.params.validate();
  return ck;
}

}  // namespace isan
