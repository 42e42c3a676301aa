#include "mtu/data.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "mtu/container.hpp"
#include "mtu/errors.hpp"
#include "mtu/rng.hpp"

namespace mtu::data {

namespace {

constexpr std::array<Rgb, kNumColors> kPalette{{
    {1.f, -1.f, -1.f},
    {-1.f, 1.f, -1.f},
    {-1.f, -1.f, 1.f},
    {1.f, 1.f, -1.f},
    {1.f, -1.f, 1.f},
    {-1.f, 1.f, 1.f},
}};
constexpr std::array<std::string_view, kNumColors> kColorWords{"red", "green", "blue", "yellow", "magenta", "cyan"};
constexpr std::array<std::string_view, kNumShapes> kShapeWords{"circle", "square", "triangle"};

std::vector<std::string> build_vocabulary() {
  std::vector<std::string> v{"<pad>", "a", "on", "background", "make", "the", "remove"};
  for (auto w : kColorWords) v.emplace_back(w);
  for (auto w : kShapeWords) v.emplace_back(w);
  while (v.size() < 64) v.push_back("<unused" + std::to_string(v.size()) + ">");
  return v;
}

constexpr std::size_t kPx = kImageSize * kImageSize;

std::size_t pick(Rng& rng, std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng); }
int pick_int(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

std::size_t pick_other(Rng& rng, std::size_t n, std::initializer_list<std::size_t> avoid) {
  for (;;) {
    const auto c = pick(rng, n);
    if (std::find(avoid.begin(), avoid.end(), c) == avoid.end()) return c;
  }
}

Object random_object(Rng& rng, std::size_t bg, int x_lo, int x_hi, int r_lo, int r_hi) {
  Object o;
  o.shape = static_cast<Shape2D>(pick(rng, kNumShapes));
  o.color = pick_other(rng, kNumColors, {bg});
  o.r = pick_int(rng, r_lo, r_hi);
  o.cx = pick_int(rng, x_lo + o.r, x_hi - o.r);
  o.cy = pick_int(rng, o.r, static_cast<int>(kImageSize) - 1 - o.r);
  return o;
}

std::string prompt_for(TaskId task, const SampleMeta& m) {
  const auto& o = m.objects.at(m.target_object);
  switch (task) {
    case TaskId::kT2I:
      return "a " + std::string(color_word(o.color)) + " " + std::string(shape_word(o.shape)) + " on " +
             std::string(color_word(m.bg)) + " background";
    case TaskId::kIE:
      return "make the " + std::string(shape_word(o.shape)) + " " + std::string(color_word(m.new_color));
    case TaskId::kIP:
      return "remove the " + std::string(shape_word(o.shape));
    case TaskId::kSR:
      return "";
  }
  return "";
}

}  // namespace

const Rgb& palette(std::size_t color) { return kPalette.at(color); }

Rgb background(std::size_t color) {
  auto c = kPalette.at(color);
  for (auto& v : c) v *= 0.5f;
  return c;
}

std::string_view color_word(std::size_t color) { return kColorWords.at(color); }
std::string_view shape_word(Shape2D s) { return kShapeWords.at(static_cast<std::size_t>(s)); }

const std::vector<std::string>& vocabulary() {
  static const auto v = build_vocabulary();
  return v;
}

int token_id(std::string_view word) {
  const auto& v = vocabulary();
  const auto it = std::find(v.begin(), v.end(), word);
  if (it == v.end()) throw DataError("word '" + std::string(word) + "' is not in the vocabulary");
  return static_cast<int>(it - v.begin());
}

std::vector<int> encode(std::string_view prompt) {
  std::vector<int> ids;
  std::istringstream ss{std::string(prompt)};
  std::string w;
  while (ss >> w) ids.push_back(token_id(w));
  if (ids.size() > kTextLen) {
    throw DataError("prompt has " + std::to_string(ids.size()) + " words; at most " + std::to_string(kTextLen) +
                    " fit");
  }
  ids.resize(kTextLen, kPad);
  return ids;
}

std::string decode(const std::vector<int>& ids) {
  std::string out;
  for (int id : ids) {
    if (id == kPad) continue;
    if (id < 0 || static_cast<std::size_t>(id) >= vocabulary().size()) throw DataError("token id out of range");
    if (!out.empty()) out += ' ';
    out += vocabulary()[static_cast<std::size_t>(id)];
  }
  return out;
}

void write_vocabulary(const std::filesystem::path& path) {
  std::string text;
  for (const auto& w : vocabulary()) text += w + "\n";
  io::write_text_atomic(path, text);
}

std::vector<std::string> read_vocabulary(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open vocabulary " + path.string());
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

std::vector<std::uint8_t> object_mask(const Object& o, std::size_t size) {
  std::vector<std::uint8_t> m(size * size, 0);
  const int n = static_cast<int>(size);
  for (int y = std::max(0, o.cy - o.r); y <= std::min(n - 1, o.cy + o.r); ++y) {
    for (int x = std::max(0, o.cx - o.r); x <= std::min(n - 1, o.cx + o.r); ++x) {
      const int dx = x - o.cx, dy = y - o.cy;
      bool in = false;
      switch (o.shape) {
        case Shape2D::kCircle:
          in = dx * dx + dy * dy <= o.r * o.r;
          break;
        case Shape2D::kSquare:
          in = true;
          break;
        case Shape2D::kTriangle:
          in = 2 * std::abs(dx) <= dy + o.r;
          break;
      }
      if (in) m[static_cast<std::size_t>(y * n + x)] = 1;
    }
  }
  return m;
}

Image render(std::size_t bg_color, const std::vector<Object>& objects, std::size_t size) {
  const auto px = size * size;
  Image img(kChannels * px);
  const auto bg = background(bg_color);
  for (std::size_t c = 0; c < kChannels; ++c) std::fill_n(img.begin() + static_cast<std::ptrdiff_t>(c * px), px, bg[c]);
  for (const auto& o : objects) {
    const auto m = object_mask(o, size);
    const auto& col = palette(o.color);
    for (std::size_t i = 0; i < px; ++i)
      if (m[i])
        for (std::size_t c = 0; c < kChannels; ++c) img[c * px + i] = col[c];
  }
  return img;
}

Image recolor(const Image& img, const Object& o, std::size_t new_color) {
  Image out = img;
  const auto m = object_mask(o);
  const auto& col = palette(new_color);
  for (std::size_t i = 0; i < kPx; ++i)
    if (m[i])
      for (std::size_t c = 0; c < kChannels; ++c) out[c * kPx + i] = col[c];
  return out;
}

Image degrade(const Image& target, std::uint64_t noise_seed) {
  constexpr std::size_t n = kImageSize, h = n / 2;
  Rng rng(noise_seed);
  std::normal_distribution<float> noise(0.f, 0.05f);
  Image out(target.size());
  std::vector<float> low(h * h), tmp(h * h);
  auto at = [&](const std::vector<float>& v, std::ptrdiff_t y, std::ptrdiff_t x) {
    const auto cy = std::clamp<std::ptrdiff_t>(y, 0, h - 1), cx = std::clamp<std::ptrdiff_t>(x, 0, h - 1);
    return v[static_cast<std::size_t>(cy) * h + static_cast<std::size_t>(cx)];
  };
  for (std::size_t c = 0; c < kChannels; ++c) {
    const float* src = target.data() + c * kPx;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < h; ++x)
        low[y * h + x] = 0.25f * (src[2 * y * n + 2 * x] + src[2 * y * n + 2 * x + 1] + src[(2 * y + 1) * n + 2 * x] +
                                  src[(2 * y + 1) * n + 2 * x + 1]);
    for (std::ptrdiff_t y = 0; y < static_cast<std::ptrdiff_t>(h); ++y)
      for (std::ptrdiff_t x = 0; x < static_cast<std::ptrdiff_t>(h); ++x)
        tmp[static_cast<std::size_t>(y) * h + static_cast<std::size_t>(x)] =
            0.25f * at(low, y, x - 1) + 0.5f * at(low, y, x) + 0.25f * at(low, y, x + 1);
    for (std::ptrdiff_t y = 0; y < static_cast<std::ptrdiff_t>(h); ++y)
      for (std::ptrdiff_t x = 0; x < static_cast<std::ptrdiff_t>(h); ++x)
        low[static_cast<std::size_t>(y) * h + static_cast<std::size_t>(x)] =
            0.25f * at(tmp, y - 1, x) + 0.5f * at(tmp, y, x) + 0.25f * at(tmp, y + 1, x);
    for (auto& v : low) v += noise(rng);
    float* dst = out.data() + c * kPx;
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < n; ++x) dst[y * n + x] = std::clamp(low[(y / 2) * h + x / 2], -1.f, 1.f);
  }
  return out;
}

Image mask_box(const Image& img, const std::array<int, 4>& box) {
  Image out = img;
  for (std::size_t c = 0; c < kChannels; ++c)
    for (int y = box[1]; y < box[3]; ++y)
      for (int x = box[0]; x < box[2]; ++x) out[c * kPx + static_cast<std::size_t>(y) * kImageSize + static_cast<std::size_t>(x)] = 0.f;
  return out;
}

std::string_view split_name(Split s) {
  switch (s) {
    case Split::kTrain:
      return "train";
    case Split::kVal:
      return "val";
    case Split::kTest:
      return "test";
  }
  return "?";
}

Split parse_split(std::string_view name) {
  for (auto s : {Split::kTrain, Split::kVal, Split::kTest})
    if (split_name(s) == name) return s;
  throw DataError("unknown split '" + std::string(name) + "' (known: train, val, test)");
}

std::size_t SplitSizes::size(Split s) const {
  return s == Split::kTrain ? train : s == Split::kVal ? val : test;
}

std::size_t SplitSizes::offset(Split s) const {
  return s == Split::kTrain ? 0 : s == Split::kVal ? train : train + val;
}

Sample generate_one(TaskId task, Split split, std::size_t index, std::uint64_t seed, const SplitSizes& sizes) {
  if (index >= sizes.size(split)) {
    throw DataError("index " + std::to_string(index) + " outside " + std::string(split_name(split)) + " split of " +
                    std::to_string(sizes.size(split)));
  }
  Sample s;
  s.task = task;
  auto& m = s.meta;
  m.index = sizes.offset(split) + index;
  Rng rng(mix_seed(seed, {static_cast<std::uint64_t>(task), m.index}));
  m.bg = pick(rng, kNumColors);
  const int n = static_cast<int>(kImageSize);
  switch (task) {
    case TaskId::kT2I:
      m.objects = {random_object(rng, m.bg, 0, n - 1, 4, 7)};
      s.target = render(m.bg, m.objects);
      break;
    case TaskId::kIE: {
      m.objects = {random_object(rng, m.bg, 0, n - 1, 4, 7)};
      m.new_color = pick_other(rng, kNumColors, {m.bg, m.objects[0].color});
      s.cond = render(m.bg, m.objects);
      s.target = recolor(*s.cond, m.objects[0], m.new_color);
      break;
    }
    case TaskId::kSR:
      m.objects = {random_object(rng, m.bg, 0, n - 1, 3, 6), random_object(rng, m.bg, 0, n - 1, 3, 6)};
      m.degrade_seed = rng();
      s.target = render(m.bg, m.objects);
      s.cond = degrade(s.target, m.degrade_seed);
      break;
    case TaskId::kIP: {
      auto left = random_object(rng, m.bg, 0, n / 2 - 1, 3, 5);
      auto right = random_object(rng, m.bg, n / 2, n - 1, 3, 5);
      while (right.shape == left.shape) right.shape = static_cast<Shape2D>(pick(rng, kNumShapes));
      m.objects = {left, right};
      m.target_object = pick(rng, 2);
      const auto& o = m.objects[m.target_object];
      const int half_lo = m.target_object == 0 ? 0 : n / 2, half_hi = m.target_object == 0 ? n / 2 : n;
      m.box = {std::max(half_lo, o.cx - o.r), std::max(0, o.cy - o.r), std::min(half_hi, o.cx + o.r + 1),
               std::min(n, o.cy + o.r + 1)};
      s.cond = mask_box(render(m.bg, m.objects), m.box);
      s.target = render(m.bg, {m.objects[1 - m.target_object]});
      break;
    }
  }
  s.tokens = encode(prompt_for(task, m));
  return s;
}

Dataset generate(TaskId task, Split split, std::size_t count, std::uint64_t seed, const SplitSizes& sizes) {
  if (count == 0) throw DataError("sample count must be >= 1");
  if (count > sizes.size(split)) {
    throw DataError("requested " + std::to_string(count) + " samples but the " + std::string(split_name(split)) +
                    " split holds " + std::to_string(sizes.size(split)));
  }
  Dataset ds{task, split, seed, {}};
  ds.samples.reserve(count);
  for (std::size_t i = 0; i < count; ++i) ds.samples.push_back(generate_one(task, split, i, seed, sizes));
  return ds;
}

namespace {

constexpr std::size_t kMaxObjects = 2;
constexpr std::size_t kMetaInts = 10 + 5 * kMaxObjects;

void pack_meta(const SampleMeta& m, std::vector<int>& out) {
  out.push_back(static_cast<int>(m.index));
  out.push_back(static_cast<int>(m.bg));
  out.push_back(static_cast<int>(m.new_color));
  out.push_back(static_cast<int>(m.target_object));
  for (int b : m.box) out.push_back(b);
  out.push_back(static_cast<int>(static_cast<std::uint32_t>(m.degrade_seed)));
  out.push_back(static_cast<int>(static_cast<std::uint32_t>(m.degrade_seed >> 32)));
  for (std::size_t i = 0; i < kMaxObjects; ++i) {
    if (i < m.objects.size()) {
      const auto& o = m.objects[i];
      out.insert(out.end(), {static_cast<int>(o.shape), static_cast<int>(o.color), o.cx, o.cy, o.r});
    } else {
      out.insert(out.end(), {-1, 0, 0, 0, 0});
    }
  }
}

SampleMeta unpack_meta(const int* v) {
  SampleMeta m;
  m.index = static_cast<std::size_t>(v[0]);
  m.bg = static_cast<std::size_t>(v[1]);
  m.new_color = static_cast<std::size_t>(v[2]);
  m.target_object = static_cast<std::size_t>(v[3]);
  for (std::size_t i = 0; i < 4; ++i) m.box[i] = v[4 + i];
  m.degrade_seed = static_cast<std::uint64_t>(static_cast<std::uint32_t>(v[8])) |
                   (static_cast<std::uint64_t>(static_cast<std::uint32_t>(v[9])) << 32);
  for (std::size_t i = 0; i < kMaxObjects; ++i) {
    const int* o = v + 10 + 5 * i;
    if (o[0] < 0) continue;
    if (o[0] >= static_cast<int>(kNumShapes) || o[1] < 0 || o[1] >= static_cast<int>(kNumColors)) {
      throw DataError("dataset sample metadata is corrupt");
    }
    m.objects.push_back({static_cast<Shape2D>(o[0]), static_cast<std::size_t>(o[1]), o[2], o[3], o[4]});
  }
  return m;
}

}  // namespace

void save_dataset(const std::filesystem::path& path, const Dataset& ds) {
  io::Container c;
  const auto n = ds.samples.size();
  c.meta = {{"kind", "dataset"},
            {"task", std::string(task_name(ds.task))},
            {"split", std::string(split_name(ds.split))},
            {"seed", std::to_string(ds.seed)},
            {"count", std::to_string(n)},
            {"image_size", std::to_string(kImageSize)},
            {"channels", std::to_string(kChannels)},
            {"text_len", std::to_string(kTextLen)},
            {"vocabulary", "vocab.txt"}};
  std::vector<float> target, cond;
  std::vector<int> tokens, meta;
  for (const auto& s : ds.samples) {
    if (s.task != ds.task) throw DataError("dataset mixes tasks");
    target.insert(target.end(), s.target.begin(), s.target.end());
    if (task_has_image(ds.task)) cond.insert(cond.end(), s.cond->begin(), s.cond->end());
    tokens.insert(tokens.end(), s.tokens.begin(), s.tokens.end());
    pack_meta(s.meta, meta);
  }
  const Shape img{n, kChannels, kImageSize, kImageSize};
  c.add_real<float>("target", img, target);
  if (task_has_image(ds.task)) c.add_real<float>("cond", img, cond);
  c.add_ints("tokens", {n, kTextLen}, tokens);
  c.add_ints("meta", {n, kMetaInts}, meta);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  write_vocabulary(path.parent_path() / "vocab.txt");
  io::write_container(path, c);
}

Dataset load_dataset(const std::filesystem::path& path) {
  io::Container c;
  try {
    c = io::read_container(path);
  } catch (const CheckpointError& e) {
    throw DataError(std::string("dataset ") + path.string() + ": " + e.what());
  }
  auto need = [&](const std::string& k) -> const std::string& {
    const auto it = c.meta.find(k);
    if (it == c.meta.end()) throw DataError("dataset " + path.string() + " lacks '" + k + "'");
    return it->second;
  };
  if (need("kind") != "dataset") throw DataError(path.string() + " is not a dataset file");
  if (need("image_size") != std::to_string(kImageSize) || need("channels") != std::to_string(kChannels) ||
      need("text_len") != std::to_string(kTextLen)) {
    throw DataError("dataset " + path.string() + " has an unsupported geometry");
  }
  Dataset ds;
  ds.task = parse_task(need("task"));
  ds.split = parse_split(need("split"));
  ds.seed = std::stoull(need("seed"));
  const auto n = static_cast<std::size_t>(std::stoull(need("count")));
  auto blob = [&](const char* name, Shape shape) -> const io::Blob& {
    const auto* b = c.find(name);
    if (!b || b->shape != shape) throw DataError("dataset " + path.string() + " has a missing or misshapen '" + name + "'");
    return *b;
  };
  const Shape img{n, kChannels, kImageSize, kImageSize};
  const auto target = blob("target", img).as<float>();
  std::vector<float> cond;
  if (task_has_image(ds.task)) cond = blob("cond", img).as<float>();
  const auto tokens = blob("tokens", {n, kTextLen}).as<int>();
  const auto meta = blob("meta", {n, kMetaInts}).as<int>();
  const auto per = kChannels * kPx;
  for (std::size_t i = 0; i < n; ++i) {
    Sample s;
    s.task = ds.task;
    s.target.assign(target.begin() + static_cast<std::ptrdiff_t>(i * per),
                    target.begin() + static_cast<std::ptrdiff_t>((i + 1) * per));
    if (!cond.empty()) {
      s.cond = Image(cond.begin() + static_cast<std::ptrdiff_t>(i * per),
                     cond.begin() + static_cast<std::ptrdiff_t>((i + 1) * per));
    }
    s.tokens.assign(tokens.begin() + static_cast<std::ptrdiff_t>(i * kTextLen),
                    tokens.begin() + static_cast<std::ptrdiff_t>((i + 1) * kTextLen));
    s.meta = unpack_meta(meta.data() + i * kMetaInts);
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

}  // namespace mtu::data
