#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "eve/rng.hpp"

namespace eve::shapeworld {

enum class Shape : std::uint8_t { Circle, Square, Triangle, Cross };
enum class Color : std::uint8_t { Red, Green, Blue, Yellow, White };
enum class ObjSize : std::uint8_t { Small, Large };

inline constexpr int kNumShapes = 4;
inline constexpr int kNumColors = 5;

struct Object {
  int row = 0;
  int col = 0;
  Shape shape = Shape::Circle;
  Color color = Color::Red;
  ObjSize size = ObjSize::Small;
};

// A grid scene: 1-3 objects on distinct cells, no two objects sharing both
// shape and color (so color+shape uniquely names an object).
struct Scene {
  int grid = 2;
  std::vector<Object> objects;
};

// Closed, version-stable vocabulary. Reserved ids 0=[PAD], 1=[CLS], 2=[MASK];
// all content words have ids >= 3.
class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kCls = 1;
  static constexpr int kMask = 2;

  Vocab();

  int id(const std::string& word) const;  // throws naming the word if unknown
  const std::string& word(int id) const;  // throws if out of range
  int size() const { return static_cast<int>(words_.size()); }
  bool is_reserved(int id) const { return id >= 0 && id < 3; }
  const std::vector<std::string>& words() const { return words_; }

  // Word groups used by caption logic and probes (content ids, ascending).
  const std::vector<int>& color_ids() const { return color_ids_; }
  const std::vector<int>& shape_ids() const { return shape_ids_; }
  const std::vector<int>& size_ids() const { return size_ids_; }
  const std::vector<int>& article_ids() const { return article_ids_; }
  const std::vector<int>& relation_ids() const { return relation_ids_; }

 private:
  std::vector<std::string> words_;
  std::vector<int> color_ids_, shape_ids_, size_ids_, article_ids_, relation_ids_;
};

std::vector<int> tokenize(const Vocab& v, const std::string& text);
std::string detokenize(const Vocab& v, const std::vector<int>& ids);

const char* shape_word(Shape s);
const char* color_word(Color c);
const char* size_word(ObjSize s);

// Scene sampling, rendering and captioning. All randomness flows through the
// caller's generator; rendering is a pure function of the scene.
Scene sample_scene(Rng& rng, int grid = 2, int min_objects = 1, int max_objects = 3);
std::vector<float> render(const Scene& scene, int image_size);  // H=W, C=3, [0,1]
std::string caption_for(const Scene& scene, Rng& rng, bool allow_relations = true);

// Decision procedure: does the scene make the caption true? Existential
// semantics; malformed captions are simply false.
bool entails(const Scene& scene, const Vocab& v, const std::vector<int>& caption);

// Horizontal-flip augmentation: mirror the image and swap left-of/right-of in
// the caption, preserving truthfulness.
void hflip_image(std::vector<float>& image, int h, int w);
void hflip_caption(const Vocab& v, std::vector<int>& ids);

struct Sample {
  std::vector<float> image;  // H*W*3, row-major (y, x, c)
  std::vector<int> ids;      // raw caption, no padding, no reserved ids
};

struct Corpus {
  int height = 0, width = 0, channels = 3;
  int max_tokens = 16;
  std::vector<Sample> samples;
};

struct CorpusOptions {
  int image_size = 64;
  int max_tokens = 16;
  bool allow_relations = true;
  std::int64_t start_index = 0;  // disjoint index ranges give disjoint splits
  int grid = 2;
  int min_objects = 1;
  int max_objects = 3;
};

// Pure function of (seed, index, options): sample index i of a corpus.
Sample make_sample(std::uint64_t seed, std::int64_t index, const CorpusOptions& opt,
                   const Vocab& v);
Scene sample_scene_at(std::uint64_t seed, std::int64_t index, const CorpusOptions& opt);
Corpus generate_corpus(int count, std::uint64_t seed, const CorpusOptions& opt = {});

void save_corpus(const Corpus& corpus, const std::string& path);
Corpus load_corpus(const std::string& path);

// Patch decomposition: N = (h/p)*(w/p) patches, each flattened to p*p*3 in
// (y, x, c) order, patches ordered row-major over the patch grid.
std::vector<float> patchify(const std::vector<float>& image, int h, int w, int p);
std::vector<float> unpatchify(const std::vector<float>& patches, int h, int w, int p);

struct Batch {
  int B = 0, H = 0, W = 0, C = 3, P = 0, N = 0, n = 0;
  std::vector<float> patches;             // B * N * (P*P*C)
  std::vector<int> token_ids;             // B * n, right-padded with [PAD]
  std::vector<std::uint8_t> token_valid;  // B * n, 1 where a real token sits
};

Batch make_batch(const std::vector<const Sample*>& pairs, int h, int w, int n, int p);

}  // namespace eve::shapeworld
