#include "eve/shapeworld.hpp"

#include <algorithm>
#include <array>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

namespace eve::shapeworld {

namespace {

constexpr const char* kShapeWords[kNumShapes] = {"circle", "square", "triangle", "cross"};
constexpr const char* kColorWords[kNumColors] = {"red", "green", "blue", "yellow", "white"};
constexpr const char* kSizeWords[2] = {"small", "large"};
constexpr const char* kArticleWords[2] = {"a", "the"};
constexpr const char* kRelationWords[4] = {"left-of", "right-of", "above", "below"};

constexpr std::array<float, 3> color_rgb(Color c) {
  switch (c) {
    case Color::Red: return {1.f, 0.f, 0.f};
    case Color::Green: return {0.f, 1.f, 0.f};
    case Color::Blue: return {0.f, 0.f, 1.f};
    case Color::Yellow: return {1.f, 1.f, 0.f};
    case Color::White: return {1.f, 1.f, 1.f};
  }
  return {0.f, 0.f, 0.f};
}

// Half-extent of a shape as a fraction of half a cell.
constexpr double size_fraction(ObjSize s) {
  return s == ObjSize::Small ? 0.50 : 0.85;
}

bool inside_shape(Shape shape, double dx, double dy, double r) {
  switch (shape) {
    case Shape::Circle:
      return dx * dx + dy * dy <= r * r;
    case Shape::Square:
      return std::max(std::abs(dx), std::abs(dy)) <= r;
    case Shape::Triangle:
      // apex up: at depth dy in [-r, r] the half-width grows from 0 to r
      return dy >= -r && dy <= r && std::abs(dx) <= (dy + r) * 0.5;
    case Shape::Cross:
      return (std::abs(dx) <= r / 3.0 && std::abs(dy) <= r) ||
             (std::abs(dy) <= r / 3.0 && std::abs(dx) <= r);
  }
  return false;
}

}  // namespace

const char* shape_word(Shape s) { return kShapeWords[static_cast<int>(s)]; }
const char* color_word(Color c) { return kColorWords[static_cast<int>(c)]; }
const char* size_word(ObjSize s) { return kSizeWords[static_cast<int>(s)]; }

Vocab::Vocab() {
  words_ = {"[PAD]", "[CLS]", "[MASK]"};
  auto push_group = [this](const char* const* list, int n, std::vector<int>& ids) {
    for (int i = 0; i < n; ++i) {
      ids.push_back(static_cast<int>(words_.size()));
      words_.emplace_back(list[i]);
    }
  };
  push_group(kArticleWords, 2, article_ids_);
  push_group(kSizeWords, 2, size_ids_);
  push_group(kColorWords, kNumColors, color_ids_);
  push_group(kShapeWords, kNumShapes, shape_ids_);
  push_group(kRelationWords, 4, relation_ids_);
}

int Vocab::id(const std::string& word) const {
  for (std::size_t i = 0; i < words_.size(); ++i) {
    if (words_[i] == word) return static_cast<int>(i);
  }
  throw std::invalid_argument("vocabulary: unknown word '" + word + "'");
}

const std::string& Vocab::word(int id) const {
  if (id < 0 || id >= size()) {
    throw std::out_of_range("vocabulary: id " + std::to_string(id) + " out of range [0, " +
                            std::to_string(size()) + ")");
  }
  return words_[static_cast<std::size_t>(id)];
}

std::vector<int> tokenize(const Vocab& v, const std::string& text) {
  std::vector<int> ids;
  std::istringstream is(text);
  std::string word;
  while (is >> word) ids.push_back(v.id(word));
  return ids;
}

std::string detokenize(const Vocab& v, const std::vector<int>& ids) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += v.word(ids[i]);
  }
  return out;
}

Scene sample_scene(Rng& rng, int grid, int min_objects, int max_objects) {
  if (grid < 1) throw std::invalid_argument("sample_scene: grid must be positive");
  int cells = grid * grid;
  max_objects = std::min({max_objects, cells, 3});
  min_objects = std::max(1, std::min(min_objects, max_objects));
  int count = rng.uniform_int(min_objects, max_objects);

  Scene scene;
  scene.grid = grid;
  std::vector<int> cell_ids = rng.sample_without_replacement(cells, count);
  // shuffle cell order so object index is not correlated with position
  for (int i = count - 1; i > 0; --i) {
    std::swap(cell_ids[static_cast<std::size_t>(i)],
              cell_ids[static_cast<std::size_t>(rng.uniform_int(i + 1))]);
  }
  // distinct (shape, color) combinations keep references unambiguous
  std::vector<int> combos = rng.sample_without_replacement(kNumShapes * kNumColors, count);
  for (int i = count - 1; i > 0; --i) {
    std::swap(combos[static_cast<std::size_t>(i)],
              combos[static_cast<std::size_t>(rng.uniform_int(i + 1))]);
  }
  for (int i = 0; i < count; ++i) {
    Object o;
    o.row = cell_ids[static_cast<std::size_t>(i)] / grid;
    o.col = cell_ids[static_cast<std::size_t>(i)] % grid;
    o.shape = static_cast<Shape>(combos[static_cast<std::size_t>(i)] / kNumColors);
    o.color = static_cast<Color>(combos[static_cast<std::size_t>(i)] % kNumColors);
    o.size = rng.uniform() < 0.5 ? ObjSize::Small : ObjSize::Large;
    scene.objects.push_back(o);
  }
  return scene;
}

std::vector<float> render(const Scene& scene, int image_size) {
  if (image_size < scene.grid) {
    throw std::invalid_argument("render: image size smaller than the grid");
  }
  int h = image_size, w = image_size;
  std::vector<float> img(static_cast<std::size_t>(h) * w * 3, 0.f);
  double cell_h = static_cast<double>(h) / scene.grid;
  double cell_w = static_cast<double>(w) / scene.grid;
  for (const Object& o : scene.objects) {
    auto rgb = color_rgb(o.color);
    double cy = (o.row + 0.5) * cell_h;
    double cx = (o.col + 0.5) * cell_w;
    double r = size_fraction(o.size) * 0.5 * std::min(cell_h, cell_w);
    int y0 = std::max(0, static_cast<int>(cy - r) - 1);
    int y1 = std::min(h - 1, static_cast<int>(cy + r) + 1);
    int x0 = std::max(0, static_cast<int>(cx - r) - 1);
    int x1 = std::min(w - 1, static_cast<int>(cx + r) + 1);
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        double dy = (y + 0.5) - cy;
        double dx = (x + 0.5) - cx;
        if (inside_shape(o.shape, dx, dy, r)) {
          float* px = img.data() + (static_cast<std::size_t>(y) * w + x) * 3;
          px[0] = rgb[0];
          px[1] = rgb[1];
          px[2] = rgb[2];
        }
      }
    }
  }
  return img;
}

namespace {

std::string noun_phrase(const Object& o, Rng& rng) {
  std::string np = kArticleWords[rng.uniform_int(2)];
  np += ' ';
  np += size_word(o.size);
  np += ' ';
  np += color_word(o.color);
  np += ' ';
  np += shape_word(o.shape);
  return np;
}

}  // namespace

std::string caption_for(const Scene& scene, Rng& rng, bool allow_relations) {
  if (scene.objects.empty()) throw std::invalid_argument("caption_for: empty scene");
  int n = static_cast<int>(scene.objects.size());
  bool relational = allow_relations && n >= 2 && rng.uniform() < 0.5;
  if (!relational) {
    return noun_phrase(scene.objects[static_cast<std::size_t>(rng.uniform_int(n))], rng);
  }
  auto pair = rng.sample_without_replacement(n, 2);
  if (rng.uniform() < 0.5) std::swap(pair[0], pair[1]);
  const Object& a = scene.objects[static_cast<std::size_t>(pair[0])];
  const Object& b = scene.objects[static_cast<std::size_t>(pair[1])];
  std::vector<const char*> valid;
  if (a.col < b.col) valid.push_back("left-of");
  if (a.col > b.col) valid.push_back("right-of");
  if (a.row < b.row) valid.push_back("above");
  if (a.row > b.row) valid.push_back("below");
  // distinct cells guarantee at least one valid relation
  const char* rel = valid[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(valid.size())))];
  return noun_phrase(a, rng) + ' ' + rel + ' ' + noun_phrase(b, rng);
}

namespace {

struct NounPhrase {
  ObjSize size;
  Color color;
  Shape shape;
};

// Grammar: NP := article size color shape; caption := NP | NP relation NP.
bool parse_np(const Vocab& v, const std::vector<int>& ids, std::size_t at, NounPhrase* out) {
  if (at + 4 > ids.size()) return false;
  auto find = [](const std::vector<int>& group, int id) {
    for (std::size_t i = 0; i < group.size(); ++i) {
      if (group[i] == id) return static_cast<int>(i);
    }
    return -1;
  };
  if (find(v.article_ids(), ids[at]) < 0) return false;
  int s = find(v.size_ids(), ids[at + 1]);
  int c = find(v.color_ids(), ids[at + 2]);
  int sh = find(v.shape_ids(), ids[at + 3]);
  if (s < 0 || c < 0 || sh < 0) return false;
  out->size = static_cast<ObjSize>(s);
  out->color = static_cast<Color>(c);
  out->shape = static_cast<Shape>(sh);
  return true;
}

bool np_matches(const NounPhrase& np, const Object& o) {
  return o.size == np.size && o.color == np.color && o.shape == np.shape;
}

bool relation_holds(int rel_index, const Object& a, const Object& b) {
  switch (rel_index) {
    case 0: return a.col < b.col;  // left-of
    case 1: return a.col > b.col;  // right-of
    case 2: return a.row < b.row;  // above
    case 3: return a.row > b.row;  // below
  }
  return false;
}

}  // namespace

bool entails(const Scene& scene, const Vocab& v, const std::vector<int>& caption) {
  NounPhrase first;
  if (!parse_np(v, caption, 0, &first)) return false;
  if (caption.size() == 4) {
    for (const Object& o : scene.objects) {
      if (np_matches(first, o)) return true;
    }
    return false;
  }
  if (caption.size() != 9) return false;
  int rel_index = -1;
  for (std::size_t i = 0; i < v.relation_ids().size(); ++i) {
    if (v.relation_ids()[i] == caption[4]) rel_index = static_cast<int>(i);
  }
  if (rel_index < 0) return false;
  NounPhrase second;
  if (!parse_np(v, caption, 5, &second)) return false;
  for (const Object& a : scene.objects) {
    if (!np_matches(first, a)) continue;
    for (const Object& b : scene.objects) {
      if (&a == &b || !np_matches(second, b)) continue;
      if (relation_holds(rel_index, a, b)) return true;
    }
  }
  return false;
}

void hflip_image(std::vector<float>& image, int h, int w) {
  if (image.size() != static_cast<std::size_t>(h) * w * 3) {
    throw std::invalid_argument("hflip_image: buffer does not match dimensions");
  }
  for (int y = 0; y < h; ++y) {
    float* row = image.data() + static_cast<std::size_t>(y) * w * 3;
    for (int x = 0; x < w / 2; ++x) {
      for (int c = 0; c < 3; ++c) {
        std::swap(row[x * 3 + c], row[(w - 1 - x) * 3 + c]);
      }
    }
  }
}

void hflip_caption(const Vocab& v, std::vector<int>& ids) {
  int left = v.relation_ids()[0];
  int right = v.relation_ids()[1];
  for (int& id : ids) {
    if (id == left) {
      id = right;
    } else if (id == right) {
      id = left;
    }
  }
}

Scene sample_scene_at(std::uint64_t seed, std::int64_t index, const CorpusOptions& opt) {
  Rng rng = Rng::from_seed(seed).stream("corpus").derive(static_cast<std::uint64_t>(index))
                .stream("scene");
  return sample_scene(rng, opt.grid, opt.min_objects, opt.max_objects);
}

Sample make_sample(std::uint64_t seed, std::int64_t index, const CorpusOptions& opt,
                   const Vocab& v) {
  Rng base = Rng::from_seed(seed).stream("corpus").derive(static_cast<std::uint64_t>(index));
  Rng scene_rng = base.stream("scene");
  Rng caption_rng = base.stream("caption");
  Scene scene = sample_scene(scene_rng, opt.grid, opt.min_objects, opt.max_objects);
  Sample s;
  s.image = render(scene, opt.image_size);
  s.ids = tokenize(v, caption_for(scene, caption_rng, opt.allow_relations));
  if (static_cast<int>(s.ids.size()) > opt.max_tokens) {
    s.ids.resize(static_cast<std::size_t>(opt.max_tokens));
  }
  return s;
}

Corpus generate_corpus(int count, std::uint64_t seed, const CorpusOptions& opt) {
  if (count < 1) throw std::invalid_argument("generate_corpus: count must be >= 1");
  Vocab v;
  Corpus corpus;
  corpus.height = opt.image_size;
  corpus.width = opt.image_size;
  corpus.channels = 3;
  corpus.max_tokens = opt.max_tokens;
  corpus.samples.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    corpus.samples.push_back(make_sample(seed, opt.start_index + i, opt, v));
  }
  return corpus;
}

namespace {

void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void write_f32(std::ostream& os, float f) {
  std::uint32_t v;
  std::memcpy(&v, &f, 4);
  write_u32(os, v);
}

float read_f32(std::istream& is) {
  std::uint32_t v = read_u32(is);
  float f;
  std::memcpy(&f, &v, 4);
  return f;
}

constexpr char kMagic[4] = {'E', 'V', 'E', 'C'};
constexpr std::uint32_t kVersion = 1;

}  // namespace

void save_corpus(const Corpus& corpus, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_corpus: cannot open '" + path + "' for writing");
  os.write(kMagic, 4);
  write_u32(os, kVersion);
  write_u32(os, static_cast<std::uint32_t>(corpus.samples.size()));
  write_u32(os, static_cast<std::uint32_t>(corpus.height));
  write_u32(os, static_cast<std::uint32_t>(corpus.width));
  write_u32(os, static_cast<std::uint32_t>(corpus.channels));
  write_u32(os, static_cast<std::uint32_t>(corpus.max_tokens));
  std::size_t pixels = static_cast<std::size_t>(corpus.height) * corpus.width * corpus.channels;
  for (const Sample& s : corpus.samples) {
    if (s.image.size() != pixels) {
      throw std::runtime_error("save_corpus: sample image size does not match header");
    }
    for (float f : s.image) write_f32(os, f);
    write_u32(os, static_cast<std::uint32_t>(s.ids.size()));
    for (int id : s.ids) write_u32(os, static_cast<std::uint32_t>(id));
  }
  if (!os) throw std::runtime_error("save_corpus: write failed for '" + path + "'");
}

Corpus load_corpus(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_corpus: cannot open '" + path + "'");
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0) {
    throw std::runtime_error("load_corpus: '" + path + "' is not a corpus file");
  }
  std::uint32_t version = read_u32(is);
  if (version != kVersion) {
    throw std::runtime_error("load_corpus: unsupported version " + std::to_string(version));
  }
  std::uint32_t count = read_u32(is);
  Corpus corpus;
  corpus.height = static_cast<int>(read_u32(is));
  corpus.width = static_cast<int>(read_u32(is));
  corpus.channels = static_cast<int>(read_u32(is));
  corpus.max_tokens = static_cast<int>(read_u32(is));
  if (corpus.height <= 0 || corpus.width <= 0 || corpus.channels != 3) {
    throw std::runtime_error("load_corpus: corrupt header in '" + path + "'");
  }
  std::size_t pixels = static_cast<std::size_t>(corpus.height) * corpus.width * corpus.channels;
  corpus.samples.resize(count);
  for (Sample& s : corpus.samples) {
    s.image.resize(pixels);
    for (float& f : s.image) f = read_f32(is);
    std::uint32_t len = read_u32(is);
    if (!is || len > static_cast<std::uint32_t>(corpus.max_tokens)) {
      throw std::runtime_error("load_corpus: corrupt sample in '" + path + "'");
    }
    s.ids.resize(len);
    for (int& id : s.ids) id = static_cast<int>(read_u32(is));
  }
  if (!is) throw std::runtime_error("load_corpus: truncated file '" + path + "'");
  return corpus;
}

std::vector<float> patchify(const std::vector<float>& image, int h, int w, int p) {
  if (p <= 0 || h % p != 0 || w % p != 0) {
    throw std::invalid_argument("patchify: image " + std::to_string(h) + "x" +
                                std::to_string(w) + " is not divisible by patch size " +
                                std::to_string(p));
  }
  if (image.size() != static_cast<std::size_t>(h) * w * 3) {
    throw std::invalid_argument("patchify: buffer does not match dimensions");
  }
  int ph = h / p, pw = w / p;
  std::vector<float> out(image.size());
  std::size_t o = 0;
  for (int pr = 0; pr < ph; ++pr) {
    for (int pc = 0; pc < pw; ++pc) {
      for (int y = 0; y < p; ++y) {
        const float* src = image.data() +
                           ((static_cast<std::size_t>(pr) * p + y) * w + static_cast<std::size_t>(pc) * p) * 3;
        std::copy(src, src + static_cast<std::size_t>(p) * 3, out.data() + o);
        o += static_cast<std::size_t>(p) * 3;
      }
    }
  }
  return out;
}

std::vector<float> unpatchify(const std::vector<float>& patches, int h, int w, int p) {
  if (p <= 0 || h % p != 0 || w % p != 0) {
    throw std::invalid_argument("unpatchify: image " + std::to_string(h) + "x" +
                                std::to_string(w) + " is not divisible by patch size " +
                                std::to_string(p));
  }
  if (patches.size() != static_cast<std::size_t>(h) * w * 3) {
    throw std::invalid_argument("unpatchify: buffer does not match dimensions");
  }
  int ph = h / p, pw = w / p;
  std::vector<float> out(patches.size());
  std::size_t o = 0;
  for (int pr = 0; pr < ph; ++pr) {
    for (int pc = 0; pc < pw; ++pc) {
      for (int y = 0; y < p; ++y) {
        float* dst = out.data() +
                     ((static_cast<std::size_t>(pr) * p + y) * w + static_cast<std::size_t>(pc) * p) * 3;
        std::copy(patches.data() + o, patches.data() + o + static_cast<std::size_t>(p) * 3, dst);
        o += static_cast<std::size_t>(p) * 3;
      }
    }
  }
  return out;
}

Batch make_batch(const std::vector<const Sample*>& pairs, int h, int w, int n, int p) {
  if (pairs.empty()) throw std::invalid_argument("make_batch: empty batch");
  Batch b;
  b.B = static_cast<int>(pairs.size());
  b.H = h;
  b.W = w;
  b.C = 3;
  b.P = p;
  b.N = (h / p) * (w / p);
  b.n = n;
  if (p <= 0 || h % p != 0 || w % p != 0) {
    throw std::invalid_argument("make_batch: image " + std::to_string(h) + "x" +
                                std::to_string(w) + " is not divisible by patch size " +
                                std::to_string(p));
  }
  std::size_t patch_elems = static_cast<std::size_t>(b.N) * p * p * 3;
  b.patches.reserve(static_cast<std::size_t>(b.B) * patch_elems);
  b.token_ids.assign(static_cast<std::size_t>(b.B) * n, Vocab::kPad);
  b.token_valid.assign(static_cast<std::size_t>(b.B) * n, 0);
  for (int i = 0; i < b.B; ++i) {
    const Sample& s = *pairs[static_cast<std::size_t>(i)];
    std::vector<float> patched = patchify(s.image, h, w, p);
    b.patches.insert(b.patches.end(), patched.begin(), patched.end());
    std::size_t len = std::min(s.ids.size(), static_cast<std::size_t>(n));
    for (std::size_t t = 0; t < len; ++t) {
      b.token_ids[static_cast<std::size_t>(i) * n + t] = s.ids[t];
      b.token_valid[static_cast<std::size_t>(i) * n + t] = 1;
    }
  }
  return b;
}

}  // namespace eve::shapeworld
