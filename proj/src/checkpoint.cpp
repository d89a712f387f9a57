// SPDX-License-Identifier: Apache-2.0

#include "mtlab/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace mtlab {

static_assert(std::endian::native == std::endian::little, "checkpoints are written little-endian");

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

template <class T>
void put(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

void put_string(std::ostream& out, const std::string& s) {
  put<std::uint64_t>(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

void put_doubles(std::ostream& out, std::span<const double> v) {
  out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
}

class Reader {
 public:
  Reader(std::istream& in, std::string path) : in_(in), path_(std::move(path)) {}

  template <class T>
  T get() {
    T v{};
    read(reinterpret_cast<char*>(&v), sizeof(T));
    return v;
  }
  std::string get_string(std::size_t limit = std::size_t{1} << 30) {
    const auto n = get<std::uint64_t>();
    if (n > limit) fail("string length " + std::to_string(n));
    std::string s(n, '\0');
    read(s.data(), n);
    return s;
  }
  std::vector<double> get_doubles(std::size_t n) {
    std::vector<double> v(n);
    read(reinterpret_cast<char*>(v.data()), n * sizeof(double));
    return v;
  }
  [[noreturn]] void fail(const std::string& what) const {
    throw std::runtime_error("checkpoint " + path_ + ": " + what);
  }

 private:
  void read(char* dst, std::size_t n) {
    in_.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) fail("truncated");
  }
  std::istream& in_;
  std::string path_;
};

ordered_json state_json(const TrainerState& s) {
  ordered_json j;
  j["step"] = s.step;
  j["last_update"] = s.last_update;
  j["adam_t"] = s.adam.t;
  ordered_json hist = ordered_json::array();
  for (const auto& e : s.history) {
    hist.push_back(ordered_json{{"step", e.step}, {"task", to_string(e.task)}, {"m", e.m}, {"w", e.w}});
  }
  j["history"] = hist;
  ordered_json disabled = ordered_json::array();
  for (Task t : s.disabled) disabled.push_back(to_string(t));
  j["disabled"] = disabled;
  return j;
}

}  // namespace

void save_checkpoint(const std::string& path, const RunConfig& config, const Model& model, const TrainerState& state) {
  const auto tensors = model.params().tensors();
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write checkpoint " + tmp);
    out.write(kCheckpointMagic, sizeof(kCheckpointMagic) - 1);
    put<std::uint32_t>(out, kCheckpointVersion);
    put_string(out, to_json(config).dump());
    put_string(out, state_json(state).dump());
    put<std::uint64_t>(out, tensors.size());
    for (const auto& t : tensors) {
      put_string(out, t.name);
      put<std::uint64_t>(out, t.tensor.numel());
      put_doubles(out, t.tensor.data());
    }
    const bool has_adam = !state.adam.m.empty();
    put<std::uint8_t>(out, has_adam ? 1 : 0);
    if (has_adam) {
      if (state.adam.m.size() != tensors.size() || state.adam.v.size() != tensors.size()) {
        throw std::logic_error("checkpoint: optimizer state does not match the parameter list");
      }
      for (std::size_t i = 0; i < tensors.size(); ++i) {
        put_doubles(out, state.adam.m[i]);
        put_doubles(out, state.adam.v[i]);
      }
    }
    if (!out) throw std::runtime_error("error writing checkpoint " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw std::runtime_error("cannot move checkpoint into " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path);
  Reader r(in, path);
  char magic[sizeof(kCheckpointMagic) - 1];
  for (char& c : magic) c = r.get<char>();
  if (std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) r.fail("bad magic");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) r.fail("unsupported version " + std::to_string(version));

  Checkpoint ck;
  ck.config = run_config_from_json(json::parse(r.get_string()));
  const json st = json::parse(r.get_string());
  ck.state.step = st.at("step").get<std::size_t>();
  ck.state.last_update = st.at("last_update").get<std::size_t>();
  ck.state.adam.t = st.at("adam_t").get<std::size_t>();
  for (const auto& e : st.at("history")) {
    ck.state.history.push_back({e.at("step").get<std::size_t>(), parse_task(e.at("task").get<std::string>()),
                                e.at("m").get<double>(), e.at("w").get<double>()});
  }
  for (const auto& t : st.at("disabled")) ck.state.disabled.push_back(parse_task(t.get<std::string>()));

  const auto count = r.get<std::uint64_t>();
  if (count > 100000) r.fail("implausible tensor count");
  std::vector<std::size_t> sizes;
  for (std::uint64_t i = 0; i < count; ++i) {
    ck.names.push_back(r.get_string(4096));
    const auto n = r.get<std::uint64_t>();
    if (n > (std::uint64_t{1} << 32)) r.fail("implausible tensor size");
    sizes.push_back(n);
    ck.params.push_back(r.get_doubles(n));
  }
  if (r.get<std::uint8_t>()) {
    for (std::size_t n : sizes) {
      ck.state.adam.m.push_back(r.get_doubles(n));
      ck.state.adam.v.push_back(r.get_doubles(n));
    }
  }
  return ck;
}

void load_parameters(const Checkpoint& checkpoint, const Model& model) {
  const auto tensors = model.params().tensors();
  if (tensors.size() != checkpoint.params.size()) {
    throw std::runtime_error("checkpoint holds " + std::to_string(checkpoint.params.size()) +
                             " tensors, model expects " + std::to_string(tensors.size()));
  }
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    Tensor t = tensors[i].tensor;
    if (tensors[i].name != checkpoint.names[i] || t.numel() != checkpoint.params[i].size()) {
      throw std::runtime_error("checkpoint tensor '" + checkpoint.names[i] + "' does not match model tensor '" +
                               tensors[i].name + "'");
    }
    std::copy(checkpoint.params[i].begin(), checkpoint.params[i].end(), t.mutable_data().begin());
  }
}

Model restore_model(const Checkpoint& checkpoint) {
  Model model(checkpoint.config.model);
  load_parameters(checkpoint, model);
  return model;
}

}  // namespace mtlab
