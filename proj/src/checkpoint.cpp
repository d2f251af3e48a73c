#include "rectflow/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "json.hpp"

namespace rectflow::app {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little-endian");

namespace {

constexpr char kMagic[8] = {'R', 'N', 'F', 'C', 'K', 'P', 'T', '\0'};

class Writer {
 public:
  explicit Writer(std::ostream& out) : out_(out) {}
  template <class T>
  void pod(T v) {
    out_.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  void bytes(const std::string& s) {
    pod<std::uint64_t>(s.size());
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  void tensor(const std::string& name, const Tensor& t) {
    bytes(name);
    pod<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) pod<std::uint64_t>(d);
    out_.write(reinterpret_cast<const char*>(t.data()),
               static_cast<std::streamsize>(t.size() * sizeof(double)));
  }

 private:
  std::ostream& out_;
};

class ByteReader {
 public:
  ByteReader(std::istream& in, std::string path) : in_(in), path_(std::move(path)) {}
  template <class T>
  T pod() {
    T v{};
    in_.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in_) truncated();
    return v;
  }
  std::string bytes() {
    const auto n = pod<std::uint64_t>();
    if (n > (1ULL << 32)) truncated();
    std::string s(n, '\0');
    in_.read(s.data(), static_cast<std::streamsize>(n));
    if (!in_) truncated();
    return s;
  }
  std::pair<std::string, Tensor> tensor() {
    std::string name = bytes();
    const auto rank = pod<std::uint32_t>();
    if (rank > 8) truncated();
    Tensor::Shape shape(rank);
    std::size_t count = 1;
    for (auto& d : shape) {
      d = pod<std::uint64_t>();
      count *= d;
    }
    if (count > (1ULL << 32)) truncated();
    std::vector<double> values(count);
    in_.read(reinterpret_cast<char*>(values.data()),
             static_cast<std::streamsize>(count * sizeof(double)));
    if (!in_) truncated();
    return {std::move(name), Tensor(std::move(shape), std::move(values))};
  }
  [[noreturn]] void truncated() const {
    throw FileError("checkpoint '" + path_ + "' is truncated or corrupt");
  }

 private:
  std::istream& in_;
  std::string path_;
};

Tensor to_tensor(const std::vector<double>& v) { return Tensor::vector(v); }

Tensor to_tensor(const std::vector<std::size_t>& v) {
  return Tensor::vector(std::vector<double>(v.begin(), v.end()));
}

std::vector<std::size_t> to_index(const Tensor& t) {
  std::vector<std::size_t> out;
  for (double v : t.values()) out.push_back(static_cast<std::size_t>(v));
  return out;
}

}  // namespace

void save_checkpoint(const std::string& path, const ExperimentConfig& cfg,
                     const rect::RectangularFlow& model,
                     const std::optional<data::Standardization>& standardization,
                     const std::mt19937_64& rng) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FileError("cannot write checkpoint '" + path + "'");
  std::ostringstream rng_state;
  rng_state << rng;
  json blob = {{"config", json::parse(to_json(cfg))}, {"rng_state", rng_state.str()}};

  std::vector<std::pair<std::string, Tensor>> tensors;
  for (const auto& e : model.params().entries()) tensors.emplace_back("param." + e.name, e.var.value());
  for (const auto& [name, t] : model.structure()) tensors.emplace_back("structure." + name, t);
  if (standardization) {
    const auto& s = *standardization;
    tensors.emplace_back("standardization.kept", to_tensor(s.kept_columns));
    tensors.emplace_back("standardization.mean", to_tensor(s.mean));
    tensors.emplace_back("standardization.scale", to_tensor(s.scale));
    tensors.emplace_back("standardization.raw_columns",
                         Tensor::scalar(static_cast<double>(s.raw_columns)));
    Tensor dropped({s.dropped.size(), 2});
    for (std::size_t i = 0; i < s.dropped.size(); ++i) {
      dropped(i, 0) = static_cast<double>(s.dropped[i].first);
      dropped(i, 1) = s.dropped[i].second;
    }
    tensors.emplace_back("standardization.dropped", dropped);
  }

  Writer w(out);
  out.write(kMagic, sizeof(kMagic));
  w.pod<std::uint32_t>(kCheckpointVersion);
  w.bytes(blob.dump());
  w.pod<std::uint64_t>(tensors.size());
  for (const auto& [name, t] : tensors) w.tensor(name, t);
  if (!out) throw FileError("failed writing checkpoint '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FileError("cannot read checkpoint '" + path + "'");
  ByteReader r(in, path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(magic)) != 0) {
    throw FileError("'" + path + "' is not a checkpoint");
  }
  const auto version = r.pod<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw VersionError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                           std::to_string(kCheckpointVersion) + ")",
                       version);
  }
  json blob;
  try {
    blob = json::parse(r.bytes());
  } catch (const json::parse_error&) {
    r.truncated();
  }
  if (!blob.contains("config") || !blob.contains("rng_state")) r.truncated();
  ExperimentConfig cfg = parse_config(blob["config"].dump());

  const auto count = r.pod<std::uint64_t>();
  std::vector<std::pair<std::string, Tensor>> tensors;
  for (std::uint64_t i = 0; i < count; ++i) tensors.push_back(r.tensor());

  rect::RectangularFlow model = rect::RectangularFlow::build(cfg.rect_spec(), cfg.seed);
  flows::NamedTensors structure;
  std::map<std::string, Tensor> params;
  std::map<std::string, Tensor> stdz;
  for (auto& [name, t] : tensors) {
    if (name.rfind("param.", 0) == 0) {
      params.emplace(name.substr(6), std::move(t));
    } else if (name.rfind("structure.", 0) == 0) {
      structure.emplace_back(name.substr(10), std::move(t));
    } else if (name.rfind("standardization.", 0) == 0) {
      stdz.emplace(name.substr(16), std::move(t));
    }
  }
  model.load_structure(structure);
  std::vector<Tensor> values;
  for (const auto& e : model.params().entries()) {
    auto it = params.find(e.name);
    if (it == params.end()) throw FileError("checkpoint lacks parameter '" + e.name + "'");
    if (it->second.shape() != e.var.value().shape()) {
      throw FileError("checkpoint parameter '" + e.name + "' has shape " +
                      shape_string(it->second.shape()));
    }
    values.push_back(it->second);
  }
  if (params.size() != values.size()) throw FileError("checkpoint has unexpected parameters");
  model.params().restore(values);

  Checkpoint ck{std::move(cfg), std::move(model), std::nullopt, {}};
  if (!stdz.empty()) try {
    data::Standardization s;
    s.kept_columns = to_index(stdz.at("kept"));
    auto mean = stdz.at("mean").values();
    auto scale = stdz.at("scale").values();
    s.mean.assign(mean.begin(), mean.end());
    s.scale.assign(scale.begin(), scale.end());
    s.raw_columns = static_cast<std::size_t>(stdz.at("raw_columns").item());
    const Tensor& dropped = stdz.at("dropped");
    for (std::size_t i = 0; i < dropped.rows(); ++i) {
      s.dropped.emplace_back(static_cast<std::size_t>(dropped(i, 0)), dropped(i, 1));
    }
    ck.standardization = std::move(s);
  } catch (const std::out_of_range&) {
    r.truncated();
  }
  std::istringstream rng_state(blob["rng_state"].get<std::string>());
  rng_state >> ck.rng;
  if (!rng_state) r.truncated();
  return ck;
}

}  // namespace rectflow::app
