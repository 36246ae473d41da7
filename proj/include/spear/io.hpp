#ifndef SPEAR_IO_HPP
#define SPEAR_IO_HPP

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "spear/common.hpp"
#include "spear/fcnn.hpp"

// File formats: header-free CSV batches, raw little-endian float64
// column-major binaries with JSON sidecars, and gradient dumps that bundle
// per-layer gradients with the network parameters the server already knows.
namespace spear::io {

static_assert(std::endian::native == std::endian::little,
              "raw binary format assumes a little-endian host");

struct BatchData {
  Matrix inputs;  // n x b
  std::vector<int> labels;
  double range_lo = 0.0;
  double range_hi = 1.0;
  bool has_labels = false;
};

inline void write_doubles(std::ofstream& out, const double* data, std::size_t count) {
  out.write(reinterpret_cast<const char*>(data),
            static_cast<std::streamsize>(count * sizeof(double)));
}

inline void read_doubles(std::ifstream& in, double* data, std::size_t count,
                         const std::string& path) {
  in.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(count * sizeof(double)));
  if (in.gcount() != static_cast<std::streamsize>(count * sizeof(double)))
    throw std::runtime_error("truncated binary file: " + path + " (expected " +
                             std::to_string(count * sizeof(double)) + " more bytes)");
}

// Header-free comma-separated floats, n rows x b columns.
inline BatchData load_batch_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      try {
        row.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw std::runtime_error(path + ": not a number: '" + cell + "'");
      }
    }
    if (!rows.empty() && row.size() != rows.front().size())
      throw std::runtime_error(path + ": ragged rows (" + std::to_string(row.size()) +
                               " vs " + std::to_string(rows.front().size()) + " columns)");
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw std::runtime_error(path + ": empty CSV");
  BatchData batch;
  batch.inputs.resize(static_cast<Index>(rows.size()), static_cast<Index>(rows.front().size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows.front().size(); ++j)
      batch.inputs(static_cast<Index>(i), static_cast<Index>(j)) = rows[i][j];
  if (!batch.inputs.allFinite()) throw std::runtime_error(path + ": non-finite values");
  return batch;
}

// Raw binary batch: column-major float64 plus a JSON sidecar carrying
// {"n", "b", "range", "labels"}.
inline BatchData load_batch_raw(const std::string& bin_path, const std::string& sidecar_path) {
  std::ifstream side(sidecar_path);
  if (!side) throw std::runtime_error("cannot open " + sidecar_path);
  nlohmann::json meta = nlohmann::json::parse(side);
  const int n = meta.at("n").get<int>();
  const int b = meta.at("b").get<int>();
  require(n >= 1 && b >= 1, sidecar_path + ": invalid dimensions");

  BatchData batch;
  batch.inputs.resize(n, b);
  if (meta.contains("range")) {
    batch.range_lo = meta["range"][0].get<double>();
    batch.range_hi = meta["range"][1].get<double>();
  }
  if (meta.contains("labels")) {
    batch.labels = meta["labels"].get<std::vector<int>>();
    batch.has_labels = true;
    require(static_cast<int>(batch.labels.size()) == b,
            sidecar_path + ": labels length != b");
  }

  std::ifstream in(bin_path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + bin_path);
  const auto size = std::filesystem::file_size(bin_path);
  const std::size_t expected = static_cast<std::size_t>(n) * b * sizeof(double);
  if (size != expected)
    throw std::runtime_error(bin_path + ": size " + std::to_string(size) +
                             " bytes, sidecar implies " + std::to_string(expected));
  read_doubles(in, batch.inputs.data(), static_cast<std::size_t>(n) * b, bin_path);
  if (!batch.inputs.allFinite()) throw std::runtime_error(bin_path + ": non-finite values");
  return batch;
}

inline void save_batch_raw(const BatchData& batch, const std::string& bin_path,
                           const std::string& sidecar_path) {
  std::ofstream out(bin_path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + bin_path);
  write_doubles(out, batch.inputs.data(), static_cast<std::size_t>(batch.inputs.size()));
  nlohmann::json meta;
  meta["n"] = static_cast<int>(batch.inputs.rows());
  meta["b"] = static_cast<int>(batch.inputs.cols());
  meta["range"] = {batch.range_lo, batch.range_hi};
  if (batch.has_labels) meta["labels"] = batch.labels;
  std::ofstream side(sidecar_path);
  if (!side) throw std::runtime_error("cannot write " + sidecar_path);
  side << meta.dump(2) << "\n";
}

// Gradient dump: one sidecar plus raw binaries. gradients.bin holds, per
// layer, dW column-major then db; params.bin holds W column-major then bias.
struct GradientDump {
  fcnn::NetworkParams params;
  std::vector<fcnn::LayerGradient> gradients;  // weight_grad / bias_grad only
  std::optional<BatchData> batch;
};

inline void save_gradient_dump(const GradientDump& dump, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::json meta;
  meta["layers"] = nlohmann::json::array();
  for (const auto& g : dump.gradients) {
    meta["layers"].push_back({{"m", static_cast<int>(g.weight_grad.rows())},
                              {"n", static_cast<int>(g.weight_grad.cols())}});
  }
  meta["gradients"] = "gradients.bin";
  meta["params"] = "params.bin";

  std::ofstream gout(fs::path(dir) / "gradients.bin", std::ios::binary);
  for (const auto& g : dump.gradients) {
    write_doubles(gout, g.weight_grad.data(), static_cast<std::size_t>(g.weight_grad.size()));
    write_doubles(gout, g.bias_grad.data(), static_cast<std::size_t>(g.bias_grad.size()));
  }
  std::ofstream pout(fs::path(dir) / "params.bin", std::ios::binary);
  for (const auto& layer : dump.params.layers) {
    write_doubles(pout, layer.weight.data(), static_cast<std::size_t>(layer.weight.size()));
    write_doubles(pout, layer.bias.data(), static_cast<std::size_t>(layer.bias.size()));
  }
  if (dump.batch) {
    save_batch_raw(*dump.batch, (fs::path(dir) / "batch.bin").string(),
                   (fs::path(dir) / "batch.json").string());
    meta["batch"] = "batch.bin";
    meta["batch_sidecar"] = "batch.json";
  }
  std::ofstream side(fs::path(dir) / "gradients.json");
  side << meta.dump(2) << "\n";
}

inline GradientDump load_gradient_dump(const std::string& dir) {
  namespace fs = std::filesystem;
  const std::string sidecar = (fs::path(dir) / "gradients.json").string();
  std::ifstream side(sidecar);
  if (!side) throw std::runtime_error("cannot open " + sidecar);
  nlohmann::json meta = nlohmann::json::parse(side);

  GradientDump dump;
  const std::string gpath = (fs::path(dir) / meta.at("gradients").get<std::string>()).string();
  const std::string ppath = (fs::path(dir) / meta.at("params").get<std::string>()).string();
  std::ifstream gin(gpath, std::ios::binary);
  if (!gin) throw std::runtime_error("cannot open " + gpath);
  std::ifstream pin(ppath, std::ios::binary);
  if (!pin) throw std::runtime_error("cannot open " + ppath);

  for (const auto& layer_meta : meta.at("layers")) {
    const int m = layer_meta.at("m").get<int>();
    const int n = layer_meta.at("n").get<int>();
    require(m >= 1 && n >= 1, sidecar + ": invalid layer dimensions");
    fcnn::LayerGradient g;
    g.weight_grad.resize(m, n);
    g.bias_grad.resize(m);
    read_doubles(gin, g.weight_grad.data(), static_cast<std::size_t>(m) * n, gpath);
    read_doubles(gin, g.bias_grad.data(), static_cast<std::size_t>(m), gpath);
    dump.gradients.push_back(std::move(g));

    fcnn::Layer layer;
    layer.weight.resize(m, n);
    layer.bias.resize(m);
    read_doubles(pin, layer.weight.data(), static_cast<std::size_t>(m) * n, ppath);
    read_doubles(pin, layer.bias.data(), static_cast<std::size_t>(m), ppath);
    dump.params.layers.push_back(std::move(layer));
  }
  if (meta.contains("batch")) {
    dump.batch = load_batch_raw(
        (fs::path(dir) / meta.at("batch").get<std::string>()).string(),
        (fs::path(dir) / meta.at("batch_sidecar").get<std::string>()).string());
  }
  return dump;
}

}  // namespace spear::io

#endif  // SPEAR_IO_HPP
