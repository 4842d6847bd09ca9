#include "eve/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <vector>

#include "eve/config.hpp"

namespace eve {

namespace {

constexpr char kMagic[4] = {'E', 'V', 'E', 'K'};
constexpr std::uint32_t kVersion = 1;

void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 4);
}

void write_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 8);
}

void write_string(std::ostream& os, const std::string& s) {
  write_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

std::uint64_t read_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

std::string read_string(std::istream& is) {
  const std::uint32_t len = read_u32(is);
  std::string s(len, '\0');
  is.read(s.data(), static_cast<std::streamsize>(len));
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  return s;
}

void write_tensor_data(std::ostream& os, const Tensor& t) {
  const std::int64_t n = t.numel();
  if (t.dtype() == DType::F32) {
    const float* p = t.data<float>();
    for (std::int64_t i = 0; i < n; ++i) write_u32(os, std::bit_cast<std::uint32_t>(p[i]));
  } else {
    const double* p = t.data<double>();
    for (std::int64_t i = 0; i < n; ++i) write_u64(os, std::bit_cast<std::uint64_t>(p[i]));
  }
}

void read_tensor_data(std::istream& is, const Tensor& t) {
  const std::int64_t n = t.numel();
  if (t.dtype() == DType::F32) {
    float* p = const_cast<float*>(t.data<float>());
    for (std::int64_t i = 0; i < n; ++i) p[i] = std::bit_cast<float>(read_u32(is));
  } else {
    double* p = const_cast<double*>(t.data<double>());
    for (std::int64_t i = 0; i < n; ++i) p[i] = std::bit_cast<double>(read_u64(is));
  }
}

void skip_tensor_data(std::istream& is, DType dt, std::int64_t n) {
  is.seekg(static_cast<std::streamoff>(n * static_cast<std::int64_t>(dtype_size(dt))),
           std::ios::cur);
  if (!is) throw std::runtime_error("checkpoint: truncated file");
}

struct StoredTensorHeader {
  std::string name;
  DType dtype = DType::F32;
  std::vector<int> shape;
  std::int64_t numel = 1;
};

StoredTensorHeader read_tensor_header(std::istream& is) {
  StoredTensorHeader h;
  h.name = read_string(is);
  const std::uint32_t dt = read_u32(is);
  if (dt > 1) throw std::runtime_error("checkpoint: unknown dtype for " + h.name);
  h.dtype = dt == 0 ? DType::F32 : DType::F64;
  const std::uint32_t rank = read_u32(is);
  if (rank > 8) throw std::runtime_error("checkpoint: implausible rank for " + h.name);
  for (std::uint32_t i = 0; i < rank; ++i) {
    const std::uint32_t d = read_u32(is);
    h.shape.push_back(static_cast<int>(d));
    h.numel *= d;
  }
  return h;
}

CheckpointMeta read_header(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0) {
    throw std::runtime_error("checkpoint: bad magic (not a checkpoint file)");
  }
  CheckpointMeta meta;
  meta.version = read_u32(is);
  if (meta.version != kVersion) {
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(meta.version));
  }
  meta.digest = read_u64(is);
  meta.config_text = read_string(is);
  meta.step = static_cast<std::int64_t>(read_u64(is));
  meta.seed = read_u64(is);
  return meta;
}

}  // namespace

void save_checkpoint(const std::string& path, const EveModel& m, const AdamW* opt,
                     std::int64_t step) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
  os.write(kMagic, 4);
  write_u32(os, kVersion);
  write_u64(os, config_digest(m.config()));
  write_string(os, config_to_text(m.config()));
  write_u64(os, static_cast<std::uint64_t>(step));
  write_u64(os, m.config().seed);

  write_u32(os, static_cast<std::uint32_t>(m.params().size()));
  for (const Param& p : m.params()) {
    write_string(os, p.name);
    write_u32(os, p.tensor.dtype() == DType::F32 ? 0u : 1u);
    write_u32(os, static_cast<std::uint32_t>(p.tensor.rank()));
    for (int i = 0; i < p.tensor.rank(); ++i) {
      write_u32(os, static_cast<std::uint32_t>(p.tensor.dim(i)));
    }
    write_tensor_data(os, p.tensor);
  }

  os.put(opt ? 1 : 0);
  if (opt) {
    write_u64(os, static_cast<std::uint64_t>(opt->t()));
    for (std::size_t i = 0; i < m.params().size(); ++i) {
      write_tensor_data(os, opt->m_state()[i]);
      write_tensor_data(os, opt->v_state()[i]);
    }
  }
  if (!os) throw std::runtime_error("checkpoint: write to " + path + " failed");
}

CheckpointMeta read_checkpoint_meta(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
  CheckpointMeta meta = read_header(is);
  // Seek past the tensor payloads to reach the optimizer flag.
  const std::uint32_t count = read_u32(is);
  for (std::uint32_t i = 0; i < count; ++i) {
    const StoredTensorHeader h = read_tensor_header(is);
    skip_tensor_data(is, h.dtype, h.numel);
  }
  const int flag = is.get();
  if (flag == EOF) throw std::runtime_error("checkpoint: truncated file");
  meta.has_optimizer = flag == 1;
  return meta;
}

CheckpointMeta load_checkpoint(const std::string& path, EveModel& m, AdamW* opt,
                               bool allow_missing) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
  CheckpointMeta meta = read_header(is);

  if (!allow_missing) {
    const std::uint64_t own = config_digest(m.config());
    if (own != meta.digest) {
      throw std::runtime_error(
          "checkpoint: config digest mismatch (model architecture differs from the one that "
          "wrote this file); use a matching config");
    }
  } else if (opt) {
    throw std::invalid_argument("checkpoint: optimizer state requires a strict load");
  }

  const std::uint32_t count = read_u32(is);
  std::size_t matched = 0;
  std::vector<const Param*> file_order;  // strict mode: for the optimizer block
  for (std::uint32_t i = 0; i < count; ++i) {
    StoredTensorHeader h = read_tensor_header(is);
    const Param* target = nullptr;
    for (const Param& p : m.params()) {
      if (p.name == h.name) {
        target = &p;
        break;
      }
    }
    if (!target) {
      if (!allow_missing) {
        throw std::runtime_error("checkpoint: stored parameter '" + h.name +
                                 "' does not exist in this model");
      }
      skip_tensor_data(is, h.dtype, h.numel);
      continue;
    }
    if (target->tensor.shape() != h.shape) {
      throw std::runtime_error("checkpoint: shape mismatch for '" + h.name + "'");
    }
    if (target->tensor.dtype() != h.dtype) {
      if (!allow_missing) {
        throw std::runtime_error("checkpoint: dtype mismatch for '" + h.name + "'");
      }
      // Tolerant loads convert: widening f32 -> f64 is exact, narrowing
      // rounds. Lets a 64-bit gradient check start from a 32-bit run.
      Tensor tmp = Tensor::zeros(h.shape, h.dtype);
      read_tensor_data(is, tmp);
      for (std::int64_t e = 0; e < tmp.numel(); ++e) target->tensor.set_flat(e, tmp.flat(e));
    } else {
      read_tensor_data(is, target->tensor);
    }
    file_order.push_back(target);
    ++matched;
  }
  if (!allow_missing && matched != m.params().size()) {
    throw std::runtime_error("checkpoint: file lacks parameters this model requires");
  }
  if (allow_missing && matched == 0) {
    throw std::runtime_error("checkpoint: no parameter in the file matches this model");
  }

  const int flag = is.get();
  if (flag == EOF) throw std::runtime_error("checkpoint: truncated file");
  meta.has_optimizer = flag == 1;
  if (opt) {
    if (!meta.has_optimizer) {
      throw std::runtime_error("checkpoint: file has no optimizer state to restore");
    }
    const auto t = static_cast<std::int64_t>(read_u64(is));
    std::vector<Tensor> ms, vs;
    for (const Param* p : file_order) {
      Tensor mt = Tensor::zeros(p->tensor.shape(), DType::F64);
      Tensor vt = Tensor::zeros(p->tensor.shape(), DType::F64);
      read_tensor_data(is, mt);
      read_tensor_data(is, vt);
      ms.push_back(mt);
      vs.push_back(vt);
    }
    opt->restore(t, ms, vs);
  }
  return meta;
}

}  // namespace eve
