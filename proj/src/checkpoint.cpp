#include "eqdp/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace eqdp {

namespace {

constexpr const char* kMagic = "eqdp checkpoint v1";

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void put_u64(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& out, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  for (int i = 0; i < 4; ++i) out.push_back(char((bits >> (8 * i)) & 0xff));
}

uint64_t get_u64(const std::string& in, size_t& pos) {
  if (pos + 8 > in.size()) throw MalformedRecord("checkpoint blob truncated");
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= uint64_t(uint8_t(in[pos + size_t(i)])) << (8 * i);
  pos += 8;
  return v;
}

float get_f32(const std::string& in, size_t& pos) {
  if (pos + 4 > in.size()) throw MalformedRecord("checkpoint blob truncated");
  uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= uint32_t(uint8_t(in[pos + size_t(i)])) << (8 * i);
  pos += 4;
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

void write_arrays(std::string& out, const std::vector<std::vector<float>>& arrays) {
  for (const auto& a : arrays) {
    put_u64(out, a.size());
    for (float v : a) put_f32(out, v);
  }
}

std::vector<std::vector<float>> read_arrays(const std::string& in, size_t& pos,
                                            const std::vector<std::vector<int>>& shapes) {
  std::vector<std::vector<float>> arrays;
  arrays.reserve(shapes.size());
  for (const auto& shape : shapes) {
    int64_t expect = 1;
    for (int d : shape) expect *= d;
    const uint64_t count = get_u64(in, pos);
    if (int64_t(count) != expect)
      throw MalformedRecord("blob array length does not match the manifest shape");
    std::vector<float> a(static_cast<size_t>(count));
    for (auto& v : a) v = get_f32(in, pos);
    arrays.push_back(std::move(a));
  }
  return arrays;
}

std::vector<std::string> split_ws(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  std::string tok;
  while (in >> tok) out.push_back(tok);
  return out;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::ostringstream text;
  text << kMagic << "\n";
  for (const auto& [key, value] : config_entries(ckpt.config))
    text << "config " << key << " = " << value << "\n";
  text << "widths = " << ckpt.widths[0] << " " << ckpt.widths[1] << " " << ckpt.widths[2] << "\n";
  require(ckpt.param_names.size() == ckpt.param_shapes.size() &&
              ckpt.param_names.size() == ckpt.params.size(),
          "checkpoint parameter table is inconsistent");
  for (size_t i = 0; i < ckpt.param_names.size(); ++i) {
    text << "param " << ckpt.param_names[i];
    for (int d : ckpt.param_shapes[i]) text << " " << d;
    text << "\n";
  }
  text << "normalization.mean =";
  for (double m : ckpt.normalization.mean) text << " " << fmt_double(m);
  text << "\nnormalization.stddev =";
  for (double s : ckpt.normalization.stddev) text << " " << fmt_double(s);
  text << "\n";
  text << "accountant.sample_rate = " << fmt_double(ckpt.accountant_sample_rate) << "\n";
  text << "accountant.noise_multiplier = " << fmt_double(ckpt.accountant_noise) << "\n";
  text << "accountant.steps = " << ckpt.accountant_steps << "\n";
  text << "optimizer.step_count = " << ckpt.step_count << "\n";
  text << "ema.decay = " << fmt_double(ckpt.ema_decay) << "\n";
  text << "blob arrays=" << ckpt.params.size() << " ema=" << (ckpt.has_ema() ? 1 : 0) << "\n";

  std::string blob;
  write_arrays(blob, ckpt.params);
  if (ckpt.has_ema()) {
    require(ckpt.ema.size() == ckpt.params.size(), "ema array count mismatch");
    write_arrays(blob, ckpt.ema);
  }

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  const std::string head = text.str();
  out.write(head.data(), int64_t(head.size()));
  out.write(blob.data(), int64_t(blob.size()));
  if (!out) throw IoError("short write on '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::stringstream buffer;
  buffer << in.rdbuf();
  const std::string all = buffer.str();

  Checkpoint ckpt;
  ckpt.normalization.mean.clear();
  ckpt.normalization.stddev.clear();
  size_t pos = 0;
  bool saw_magic = false, in_blob = false;
  size_t n_arrays = 0;
  bool has_ema = false;
  try {
  while (pos < all.size() && !in_blob) {
    const size_t eol = all.find('\n', pos);
    if (eol == std::string::npos) throw MalformedRecord("manifest line without newline");
    const std::string line = all.substr(pos, eol - pos);
    pos = eol + 1;
    if (!saw_magic) {
      if (line != kMagic) throw MalformedRecord("not a checkpoint file");
      saw_magic = true;
      continue;
    }
    auto tok = split_ws(line);
    if (tok.empty()) continue;
    if (tok[0] == "config") {
      if (tok.size() < 3 || tok[2] != "=") throw MalformedRecord("bad config line: " + line);
      std::string value;
      for (size_t i = 3; i < tok.size(); ++i) {
        if (i > 3) value += " ";
        value += tok[i];
      }
      set_config_entry(ckpt.config, tok[1], value);
    } else if (tok[0] == "widths") {
      if (tok.size() != 5) throw MalformedRecord("bad widths line");
      for (int i = 0; i < 3; ++i) ckpt.widths[size_t(i)] = std::stoi(tok[size_t(2 + i)]);
    } else if (tok[0] == "param") {
      if (tok.size() < 3) throw MalformedRecord("bad param line: " + line);
      ckpt.param_names.push_back(tok[1]);
      std::vector<int> shape;
      for (size_t i = 2; i < tok.size(); ++i) shape.push_back(std::stoi(tok[i]));
      ckpt.param_shapes.push_back(std::move(shape));
    } else if (tok[0] == "normalization.mean") {
      for (size_t i = 2; i < tok.size(); ++i) ckpt.normalization.mean.push_back(std::stod(tok[i]));
    } else if (tok[0] == "normalization.stddev") {
      for (size_t i = 2; i < tok.size(); ++i)
        ckpt.normalization.stddev.push_back(std::stod(tok[i]));
    } else if (tok[0] == "accountant.sample_rate") {
      ckpt.accountant_sample_rate = std::stod(tok[2]);
    } else if (tok[0] == "accountant.noise_multiplier") {
      ckpt.accountant_noise = std::stod(tok[2]);
    } else if (tok[0] == "accountant.steps") {
      ckpt.accountant_steps = std::stoll(tok[2]);
    } else if (tok[0] == "optimizer.step_count") {
      ckpt.step_count = std::stoll(tok[2]);
    } else if (tok[0] == "ema.decay") {
      ckpt.ema_decay = std::stod(tok[2]);
    } else if (tok[0] == "blob") {
      for (size_t i = 1; i < tok.size(); ++i) {
        if (tok[i].rfind("arrays=", 0) == 0) n_arrays = size_t(std::stoll(tok[i].substr(7)));
        if (tok[i].rfind("ema=", 0) == 0) has_ema = tok[i].substr(4) == "1";
      }
      in_blob = true;
    } else {
      throw MalformedRecord("unknown manifest line: " + line);
    }
  }
  } catch (const Error&) {
    throw;
  } catch (const std::exception& e) {
    throw MalformedRecord(std::string("unparsable manifest value: ") + e.what());
  }
  if (!in_blob) throw MalformedRecord("manifest ended without a blob marker");
  if (n_arrays != ckpt.param_names.size())
    throw MalformedRecord("blob array count does not match the parameter table");

  ckpt.params = read_arrays(all, pos, ckpt.param_shapes);
  if (has_ema) ckpt.ema = read_arrays(all, pos, ckpt.param_shapes);
  if (pos != all.size()) throw MalformedRecord("trailing bytes after the checkpoint blob");
  return ckpt;
}

Checkpoint checkpoint_from_model(Model<double>& model, const Config& cfg, const EmaState* ema,
                                 const ChannelStats& stats) {
  Checkpoint ckpt;
  ckpt.config = cfg;
  ckpt.widths = model.widths;
  ckpt.normalization = stats;
  for (auto* p : model.parameters()) {
    ckpt.param_names.push_back(p->name);
    ckpt.param_shapes.push_back(p->shape);
    std::vector<float> a(p->value->size());
    for (size_t i = 0; i < a.size(); ++i) a[i] = float((*p->value)[i]);
    ckpt.params.push_back(std::move(a));
  }
  if (ema) {
    ckpt.ema_decay = ema->decay;
    size_t offset = 0;
    for (const auto& shape : ckpt.param_shapes) {
      int64_t n = 1;
      for (int d : shape) n *= d;
      require(offset + size_t(n) <= ema->shadow.size(), "ema shadow is too short");
      std::vector<float> a(static_cast<size_t>(n));
      for (int64_t i = 0; i < n; ++i) a[size_t(i)] = float(ema->shadow[offset + size_t(i)]);
      offset += size_t(n);
      ckpt.ema.push_back(std::move(a));
    }
    require(offset == ema->shadow.size(), "ema shadow does not match the parameter table");
  }
  return ckpt;
}

void load_into_model(const Checkpoint& ckpt, Model<double>& model) {
  auto params = model.parameters();
  require(params.size() == ckpt.params.size(),
          "checkpoint parameter count does not match the model");
  for (size_t i = 0; i < params.size(); ++i) {
    require(params[i]->name == ckpt.param_names[i],
            "parameter name mismatch at registration slot " + std::to_string(i));
    require(params[i]->shape == ckpt.param_shapes[i],
            "parameter shape mismatch for '" + params[i]->name + "'");
    auto& v = *params[i]->value;
    const auto& a = ckpt.params[i];
    require(v.size() == a.size(), "parameter size mismatch for '" + params[i]->name + "'");
    for (size_t j = 0; j < a.size(); ++j) v[j] = double(a[j]);
  }
}

std::vector<double> checkpoint_ema_flat(const Checkpoint& ckpt) {
  const auto& source = ckpt.has_ema() ? ckpt.ema : ckpt.params;
  std::vector<double> flat;
  for (const auto& a : source)
    for (float v : a) flat.push_back(double(v));
  return flat;
}

}  // namespace eqdp
