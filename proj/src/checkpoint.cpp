#include "chprune/checkpoint.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>

#include "chprune/graph_io.hpp"

namespace chprune {

namespace {

constexpr char kMagic[8] = {'C', 'H', 'P', 'C', 'K', 'P', 'T', '\0'};
constexpr uint32_t kVersion = 1;

class Writer {
 public:
  explicit Writer(std::ostream& out) : out_(out) {}
  template <typename T>
  void pod(const T& v) {
    out_.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  void str(const std::string& s) {
    pod<uint64_t>(s.size());
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  template <typename T>
  void vec(const std::vector<T>& v) {
    pod<uint64_t>(v.size());
    out_.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(T)));
  }

 private:
  std::ostream& out_;
};

class Reader {
 public:
  explicit Reader(std::istream& in) : in_(in) {}
  template <typename T>
  T pod() {
    T v{};
    in_.read(reinterpret_cast<char*>(&v), sizeof(T));
    check();
    return v;
  }
  uint64_t length() {
    auto n = pod<uint64_t>();
    if (n > (uint64_t{1} << 34)) throw Error(ErrorCode::CheckpointReadFailure, "implausible length in checkpoint");
    return n;
  }
  std::string str() {
    std::string s(length(), '\0');
    in_.read(s.data(), static_cast<std::streamsize>(s.size()));
    check();
    return s;
  }
  template <typename T>
  std::vector<T> vec() {
    std::vector<T> v(length());
    in_.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(T)));
    check();
    return v;
  }

 private:
  void check() {
    if (!in_) throw Error(ErrorCode::CheckpointReadFailure, "checkpoint is truncated");
  }
  std::istream& in_;
};

void write_moments(Writer& w, const std::map<NodeId, std::array<std::vector<double>, 4>>& m) {
  w.pod<uint64_t>(m.size());
  for (const auto& [id, arr] : m) {
    w.str(id);
    for (const auto& v : arr) w.vec(v);
  }
}

std::map<NodeId, std::array<std::vector<double>, 4>> read_moments(Reader& r) {
  std::map<NodeId, std::array<std::vector<double>, 4>> m;
  auto n = r.length();
  for (uint64_t i = 0; i < n; ++i) {
    auto id = r.str();
    auto& arr = m[id];
    for (auto& v : arr) v = r.vec<double>();
  }
  return m;
}

void write_groups(Writer& w, const std::map<int, std::vector<double>>& m) {
  w.pod<uint64_t>(m.size());
  for (const auto& [g, v] : m) {
    w.pod<int32_t>(g);
    w.vec(v);
  }
}

std::map<int, std::vector<double>> read_groups(Reader& r) {
  std::map<int, std::vector<double>> m;
  auto n = r.length();
  for (uint64_t i = 0; i < n; ++i) {
    int g = r.pod<int32_t>();
    m[g] = r.vec<double>();
  }
  return m;
}

}  // namespace

void save_checkpoint(const Checkpoint& c, const std::string& path) {
  std::filesystem::path target(path);
  std::filesystem::path tmp = target;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::CheckpointWriteFailure, "cannot open '" + tmp.string() + "'");
    Writer w(out);
    out.write(kMagic, sizeof(kMagic));
    w.pod(kVersion);
    w.str(serialize_graph(c.graph));
    w.pod<uint64_t>(c.weights.version);
    w.pod<uint64_t>(c.weights.nodes.size());
    for (const auto& [id, p] : c.weights.nodes) {
      w.str(id);
      w.vec(p.weight);
      w.vec(p.bias);
      w.vec(p.gamma);
      w.vec(p.beta);
      w.vec(p.running_mean);
      w.vec(p.running_var);
    }
    w.pod(c.gates.steepness);
    w.pod(c.gates.stiffening_sd);
    write_groups(w, c.gates.values);
    w.pod<uint64_t>(c.optimizer.step);
    write_moments(w, c.optimizer.first);
    write_moments(w, c.optimizer.second);
    write_groups(w, c.optimizer.gate_first);
    write_groups(w, c.optimizer.gate_second);
    w.pod(c.seed);
    w.pod(c.next_step);
    w.pod(c.epoch_counter);
    w.pod(c.iteration);
    w.str(c.state);
    out.flush();
    if (!out) throw Error(ErrorCode::CheckpointWriteFailure, "write to '" + tmp.string() + "' failed");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, target, ec);
  if (ec) throw Error(ErrorCode::CheckpointWriteFailure, "cannot move checkpoint into place: " + ec.message());
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::CheckpointReadFailure, "cannot open '" + path + "'");
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw Error(ErrorCode::CheckpointReadFailure, "'" + path + "' is not a checkpoint");
  Reader r(in);
  auto version = r.pod<uint32_t>();
  if (version != kVersion)
    throw Error(ErrorCode::CheckpointReadFailure, "unsupported checkpoint version " + std::to_string(version));
  Checkpoint c;
  try {
    c.graph = deserialize_graph(r.str());
  } catch (const Error& e) {
    throw Error(ErrorCode::CheckpointReadFailure, std::string("embedded graph: ") + e.what());
  }
  c.weights.version = r.pod<uint64_t>();
  auto n = r.length();
  for (uint64_t i = 0; i < n; ++i) {
    auto id = r.str();
    NodeParams<float> p;
    p.weight = r.vec<float>();
    p.bias = r.vec<float>();
    p.gamma = r.vec<float>();
    p.beta = r.vec<float>();
    p.running_mean = r.vec<float>();
    p.running_var = r.vec<float>();
    c.weights.nodes[id] = std::move(p);
  }
  c.gates.steepness = r.pod<double>();
  c.gates.stiffening_sd = r.pod<double>();
  c.gates.values = read_groups(r);
  c.optimizer.step = r.pod<uint64_t>();
  c.optimizer.first = read_moments(r);
  c.optimizer.second = read_moments(r);
  c.optimizer.gate_first = read_groups(r);
  c.optimizer.gate_second = read_groups(r);
  c.seed = r.pod<uint64_t>();
  c.next_step = r.pod<int64_t>();
  c.epoch_counter = r.pod<int64_t>();
  c.iteration = r.pod<int64_t>();
  c.state = r.str();
  return c;
}

}  // namespace chprune
