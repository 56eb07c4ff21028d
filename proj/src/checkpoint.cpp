#include "marlcomm/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

namespace marlcomm {

namespace {

constexpr char kMagic[8] = {'M', 'A', 'R', 'L', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
  char buf[4];
  std::memcpy(buf, &v, 4);
  out.append(buf, 4);
}

void put_u64(std::string& out, std::uint64_t v) {
  char buf[8];
  std::memcpy(buf, &v, 8);
  out.append(buf, 8);
}

void put_i64(std::string& out, std::int64_t v) {
  char buf[8];
  std::memcpy(buf, &v, 8);
  out.append(buf, 8);
}

void put_f64(std::string& out, double v) {
  char buf[8];
  std::memcpy(buf, &v, 8);
  out.append(buf, 8);
}

void put_string(std::string& out, const std::string& s) {
  put_u64(out, s.size());
  out.append(s);
}

void put_matrix(std::string& out, const std::string& name, const Matrix& m) {
  put_string(out, name);
  put_u64(out, static_cast<std::uint64_t>(m.rows()));
  put_u64(out, static_cast<std::uint64_t>(m.cols()));
  out.append(reinterpret_cast<const char*>(m.data()),
             static_cast<std::size_t>(m.size()) * sizeof(double));
}

class Reader {
 public:
  Reader(const std::string& bytes, std::string where)
      : bytes_(bytes), where_(std::move(where)) {}

  std::uint8_t u8() {
    std::uint8_t v;
    take(&v, 1);
    return v;
  }
  std::uint32_t u32() {
    std::uint32_t v;
    take(&v, 4);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v;
    take(&v, 8);
    return v;
  }
  std::int64_t i64() {
    std::int64_t v;
    take(&v, 8);
    return v;
  }
  double f64() {
    double v;
    take(&v, 8);
    return v;
  }
  std::string str() {
    const std::uint64_t n = u64();
    require(pos_ + n <= bytes_.size(), where_ + ": truncated checkpoint");
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  Matrix matrix(std::string* name_out) {
    *name_out = str();
    const std::uint64_t rows = u64();
    const std::uint64_t cols = u64();
    require(rows > 0 && cols > 0 && rows * cols < (1ull << 32),
            where_ + ": implausible tensor shape");
    Matrix m(static_cast<Index>(rows), static_cast<Index>(cols));
    take(m.data(), static_cast<std::size_t>(rows * cols) * sizeof(double));
    return m;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void take(void* dst, std::size_t n) {
    require(pos_ + n <= bytes_.size(), where_ + ": truncated checkpoint");
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }
  const std::string& bytes_;
  std::string where_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const std::string& path, const TrainConfig& config,
                     const TrainResult& state) {
  TrainConfig cfg = config;
  cfg.resolve();

  std::string payload;
  const std::string cfg_json = cfg.canonical_json();
  put_string(payload, cfg_json);
  put_u64(payload, fnv1a(cfg_json));
  put_u64(payload, state.episode_counter);

  payload.push_back(state.optimizer.algo == nn::OptAlgo::Sgd ? 0 : 1);
  put_f64(payload, state.optimizer.learning_rate);
  put_f64(payload, state.optimizer.rms_alpha);
  put_f64(payload, state.optimizer.rms_eps);
  put_i64(payload, state.optimizer.step_count);

  const nn::ParamSet& params = state.policy.params();
  put_u32(payload, static_cast<std::uint32_t>(params.names().size()));
  for (const auto& name : params.names()) {
    put_matrix(payload, name, params.at(name).value);
  }
  // Moments in parameter order; only those that exist (post-step rmsprop).
  std::uint32_t n_moments = 0;
  for (const auto& name : params.names()) {
    if (state.optimizer.moments.count(name)) ++n_moments;
  }
  put_u32(payload, n_moments);
  for (const auto& name : params.names()) {
    auto it = state.optimizer.moments.find(name);
    if (it != state.optimizer.moments.end()) {
      put_matrix(payload, name, it->second);
    }
  }

  std::ofstream out(path, std::ios::binary);
  require(out.good(), "cannot write checkpoint: " + path);
  out.write(kMagic, sizeof(kMagic));
  std::uint32_t version = kVersion;
  out.write(reinterpret_cast<const char*>(&version), 4);
  std::uint64_t size = payload.size();
  out.write(reinterpret_cast<const char*>(&size), 8);
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  std::uint64_t sum = fnv1a(payload.data(), payload.size());
  out.write(reinterpret_cast<const char*>(&sum), 8);
  require(out.good(), "write failed for checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "cannot open checkpoint: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string bytes = ss.str();

  require(bytes.size() >= sizeof(kMagic) + 4 + 8 + 8,
          path + ": not a checkpoint (too short)");
  require(std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) == 0,
          path + ": not a checkpoint (bad magic)");
  std::uint32_t version;
  std::memcpy(&version, bytes.data() + sizeof(kMagic), 4);
  require(version == kVersion,
          path + ": unsupported checkpoint version " + std::to_string(version));
  std::uint64_t size;
  std::memcpy(&size, bytes.data() + sizeof(kMagic) + 4, 8);
  const std::size_t header = sizeof(kMagic) + 4 + 8;
  require(bytes.size() == header + size + 8, path + ": truncated checkpoint");
  const std::string payload = bytes.substr(header, size);
  std::uint64_t sum;
  std::memcpy(&sum, bytes.data() + header + size, 8);
  require(sum == fnv1a(payload.data(), payload.size()),
          path + ": checkpoint checksum mismatch");

  Reader r(payload, path);
  const std::string cfg_json = r.str();
  const std::uint64_t cfg_hash = r.u64();
  require(cfg_hash == fnv1a(cfg_json), path + ": config hash mismatch");
  TrainConfig cfg = config_from_json(cfg_json);
  cfg.resolve();

  Checkpoint ckpt{cfg, TrainResult{policy_from_config(cfg)}};
  ckpt.state.episode_counter = r.u64();

  ckpt.state.optimizer.algo =
      r.u8() == 0 ? nn::OptAlgo::Sgd : nn::OptAlgo::RmsProp;
  ckpt.state.optimizer.learning_rate = r.f64();
  ckpt.state.optimizer.rms_alpha = r.f64();
  ckpt.state.optimizer.rms_eps = r.f64();
  ckpt.state.optimizer.step_count = r.i64();

  nn::ParamSet& params = ckpt.state.policy.params();
  const std::uint32_t n_params = r.u32();
  require(n_params == params.names().size(),
          path + ": parameter count does not match the config architecture");
  for (const auto& expected : params.names()) {
    std::string name;
    Matrix m = r.matrix(&name);
    require(name == expected, path + ": parameter order mismatch (got \"" +
                                  name + "\", expected \"" + expected + "\")");
    Matrix& dst = params.at(name).value;
    require(m.rows() == dst.rows() && m.cols() == dst.cols(),
            path + ": shape mismatch for parameter \"" + name + "\"");
    dst = std::move(m);
  }
  const std::uint32_t n_moments = r.u32();
  for (std::uint32_t k = 0; k < n_moments; ++k) {
    std::string name;
    Matrix m = r.matrix(&name);
    require(params.has(name),
            path + ": moment for unknown parameter \"" + name + "\"");
    const Matrix& v = params.at(name).value;
    require(m.rows() == v.rows() && m.cols() == v.cols(),
            path + ": shape mismatch for moment \"" + name + "\"");
    ckpt.state.optimizer.moments[name] = std::move(m);
  }
  require(r.done(), path + ": trailing bytes after checkpoint payload");
  return ckpt;
}

}  // namespace marlcomm
