#include "dlab/checkpoint.hpp"

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <vector>

#include "json.hpp"

namespace dlab {
namespace {

constexpr char kMagic[8] = {'D', 'L', 'A', 'B', 'C', 'K', 'P', '1'};

using json = nlohmann::json;

json spec_to_json(const ModelSpec& spec) {
  return json{{"data_dim", spec.data_dim},
              {"cond_dim", spec.cond_dim},
              {"hidden", spec.hidden},
              {"time_freqs", spec.time_freqs},
              {"head", to_string(spec.head)},
              {"t_lo", spec.t_lo},
              {"t_hi", spec.t_hi},
              {"ema_decay", spec.ema_decay},
              {"sigma_data", spec.sigma_data},
              {"eps_min", spec.eps_min},
              {"out_channels", spec.out_channels},
              {"init_seed", spec.init_seed}};
}

ModelSpec spec_from_json(const json& j) {
  ModelSpec spec;
  spec.data_dim = j.at("data_dim").get<int>();
  spec.cond_dim = j.at("cond_dim").get<int>();
  spec.hidden = j.at("hidden").get<std::vector<int>>();
  spec.time_freqs = j.at("time_freqs").get<int>();
  spec.head = pred_from_string(j.at("head").get<std::string>());
  spec.t_lo = j.at("t_lo").get<double>();
  spec.t_hi = j.at("t_hi").get<double>();
  spec.ema_decay = j.at("ema_decay").get<double>();
  spec.sigma_data = j.at("sigma_data").get<double>();
  spec.eps_min = j.at("eps_min").get<double>();
  spec.out_channels = j.at("out_channels").get<int>();
  spec.init_seed = j.at("init_seed").get<std::uint64_t>();
  return spec;
}

void write_tensor(std::ofstream& out, const Tensor& m) {
  out.write(reinterpret_cast<const char*>(m.data()),
            static_cast<std::streamsize>(sizeof(double) * m.size()));
}

void read_tensor(std::ifstream& in, Tensor& m) {
  in.read(reinterpret_cast<char*>(m.data()),
          static_cast<std::streamsize>(sizeof(double) * m.size()));
  if (!in) throw std::runtime_error("checkpoint: truncated weight payload");
}

json read_header(std::ifstream& in, const std::string& path) {
  if (!in) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
  char magic[8];
  in.read(magic, 8);
  if (!in || std::string(magic, 8) != std::string(kMagic, 8))
    throw std::runtime_error("checkpoint: '" + path + "' is not a weight snapshot");
  std::uint64_t header_len = 0;
  in.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
  if (!in) throw std::runtime_error("checkpoint: truncated header length");
  std::string text(header_len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(header_len));
  if (!in) throw std::runtime_error("checkpoint: truncated header");
  json j = json::parse(text, nullptr, /*allow_exceptions=*/false);
  if (j.is_discarded()) throw std::runtime_error("checkpoint: malformed header");
  return j;
}

}  // namespace

void save_checkpoint(const std::string& path, const DenoiserModel& model,
                     const std::string& note) {
  json header;
  header["format"] = 1;
  header["spec"] = spec_to_json(model.spec());
  if (!note.empty()) header["note"] = note;
  json shapes = json::array();
  for (const auto& m : model.w) shapes.push_back({m.rows(), m.cols()});
  header["layers"] = shapes;
  std::string text = header.dump();

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("checkpoint: cannot write '" + tmp + "'");
    out.write(kMagic, 8);
    std::uint64_t header_len = text.size();
    out.write(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& m : model.w) write_tensor(out, m);
    for (const auto& m : model.b) write_tensor(out, m);
    for (const auto& m : model.ema_w) write_tensor(out, m);
    for (const auto& m : model.ema_b) write_tensor(out, m);
    if (!out) throw std::runtime_error("checkpoint: write failed for '" + tmp + "'");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw std::runtime_error("checkpoint: cannot move '" + tmp + "' into place");
}

DenoiserModel load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  json header = read_header(in, path);
  DenoiserModel model(spec_from_json(header.at("spec")));

  const auto& shapes = header.at("layers");
  if (shapes.size() != model.w.size())
    throw std::runtime_error("checkpoint: layer count does not match the architecture");
  for (std::size_t l = 0; l < model.w.size(); ++l) {
    if (shapes[l][0].get<Eigen::Index>() != model.w[l].rows() ||
        shapes[l][1].get<Eigen::Index>() != model.w[l].cols())
      throw std::runtime_error("checkpoint: weight shape does not match the architecture");
  }
  for (auto& m : model.w) read_tensor(in, m);
  for (auto& m : model.b) read_tensor(in, m);
  for (auto& m : model.ema_w) read_tensor(in, m);
  for (auto& m : model.ema_b) read_tensor(in, m);
  return model;
}

std::string checkpoint_note(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  json header = read_header(in, path);
  return header.value("note", "");
}

}  // namespace dlab
