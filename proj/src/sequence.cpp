#include "dw0/sequence.hpp"

#include <cmath>

namespace dw0 {

std::string to_string(FrontEnd f) { return f == FrontEnd::Discrete ? "discrete" : "continuous"; }

FrontEnd front_end_from_string(const std::string& s) {
  if (s == "discrete") return FrontEnd::Discrete;
  if (s == "continuous") return FrontEnd::Continuous;
  throw UsageError("unknown front end '" + s + "' (discrete|continuous)");
}

int SequenceConfig::frame_stride() const {
  const double steps = interval_s / kStepSeconds;
  if (!(steps >= 0) || std::abs(steps - std::round(steps)) > 1e-9)
    throw UsageError("chunk interval " + std::to_string(interval_s) + " s is not a multiple of 0.5 s");
  return static_cast<int>(std::lround(steps));
}

void SequenceConfig::validate() const {
  if (history < 1) throw UsageError("sequence history must be >= 1");
  const int stride = frame_stride();
  if (history > 1 && stride == 0) throw UsageError("a zero interval only makes sense with one chunk");
  if (sequence_length() > kMaxSequenceLength)
    throw UsageError("sequence length " + std::to_string(sequence_length()) + " exceeds " +
                     std::to_string(kMaxSequenceLength));
  if ((history - 1) * stride + 1 >= kClipFrames) throw UsageError("history does not fit in a 16-frame clip");
}

namespace {
std::uint64_t key(std::uint32_t clip, int frame) { return (std::uint64_t(clip) << 16) | std::uint64_t(frame); }
}  // namespace

SequenceBuilder::SequenceBuilder(const std::vector<SceneRecord>& records, SequenceConfig config,
                                 const VisualCodebook* book, ActionTokenizer tokenizer)
    : records_(&records), config_(config), tokenizer_(tokenizer) {
  config_.validate();
  if (config_.front_end == FrontEnd::Discrete && !book) throw UsageError("discrete front end needs a codebook");
  visual_.resize(records.size());
  actions_.resize(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    index_[key(records[i].clip_id, records[i].frame_index)] = i;
    if (book) visual_[i] = encode_image(*book, records[i].image);
    actions_[i] = tokenizer_.tokenize(records[i].expert);
  }
}

std::optional<std::size_t> SequenceBuilder::find(std::uint32_t clip, int frame) const {
  if (frame < 0) return std::nullopt;
  const auto it = index_.find(key(clip, frame));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::optional<std::size_t> SequenceBuilder::next_frame(std::size_t anchor) const {
  const auto& r = records_->at(anchor);
  return find(r.clip_id, r.frame_index + 1);
}

std::vector<std::size_t> SequenceBuilder::anchors(bool need_next_frame) const {
  std::vector<std::size_t> out;
  const int stride = config_.frame_stride();
  for (std::size_t i = 0; i < records_->size(); ++i) {
    const auto& r = (*records_)[i];
    bool ok = true;
    for (int c = 0; c < config_.history && ok; ++c) {
      const int f = r.frame_index - c * stride;
      ok = find(r.clip_id, f).has_value() && find(r.clip_id, f - 1).has_value();
    }
    if (ok && need_next_frame) ok = next_frame(i).has_value();
    if (ok) out.push_back(i);
  }
  return out;
}

TokenSequence SequenceBuilder::build(std::size_t anchor) const {
  const auto& rec = records_->at(anchor);
  const int stride = config_.frame_stride();
  const int H = config_.history;
  std::vector<std::size_t> frames(static_cast<std::size_t>(H)), prev(static_cast<std::size_t>(H));
  for (int c = 0; c < H; ++c) {
    const int f = rec.frame_index - (H - 1 - c) * stride;
    const auto cur = find(rec.clip_id, f), before = find(rec.clip_id, f - 1);
    if (!cur || !before)
      throw DataError("clip " + std::to_string(rec.clip_id) + " too short for frame " +
                      std::to_string(rec.frame_index) + " with " + std::to_string(H) + " chunks");
    frames[static_cast<std::size_t>(c)] = *cur;
    prev[static_cast<std::size_t>(c)] = *before;
  }

  TokenSequence s;
  s.anchor = anchor;
  s.target = rec.expert;
  const bool continuous = config_.front_end == FrontEnd::Continuous;
  if (continuous) s.patches.resize(H * kPatchesPerImage, kPatchDim);
  auto push = [&](int id, Modality tag, int chunk) {
    s.ids.push_back(id);
    s.tags.push_back(tag);
    s.chunk.push_back(chunk);
  };
  push(VocabularyLayout::kBOS, Modality::Special, -1);
  for (int c = 0; c < H; ++c) {
    const auto& r = (*records_)[frames[static_cast<std::size_t>(c)]];
    const auto& vis = visual_[frames[static_cast<std::size_t>(c)]];
    if (!config_.vision_only) push(VocabularyLayout::command_token(r.command), Modality::Language, c);
    push(VocabularyLayout::kBOV, Modality::Special, c);
    if (c == H - 1) s.final_visual_begin = static_cast<int>(s.ids.size());
    if (continuous) s.patches.middleRows(c * kPatchesPerImage, kPatchesPerImage) = extract_patches(r.image);
    for (int v = 0; v < kPatchesPerImage; ++v) {
      s.visual_rows.push_back(static_cast<int>(s.ids.size()));
      // the continuous path embeds patches; the id slot is only a placeholder
      push(continuous ? VocabularyLayout::kVisualBegin : vis[static_cast<std::size_t>(v)], Modality::Visual, c);
    }
    if (!config_.vision_only) {
      push(VocabularyLayout::kBOA, Modality::Special, c);
      const auto& a = actions_[prev[static_cast<std::size_t>(c)]];
      if (c == H - 1) {
        s.final_action_begin = static_cast<int>(s.ids.size());
        s.prev_action = a;
      }
      for (int id : a) push(id, Modality::Action, c);
    }
  }
  s.context_length = static_cast<int>(s.ids.size());

  if (!continuous) {
    const auto& vis = visual_[anchor];
    for (int v = 0; v < kPatchesPerImage; ++v) {
      s.visual_target_rows.push_back(s.final_visual_begin - 1 + v);
      s.visual_targets.push_back(vis[static_cast<std::size_t>(v)]);
    }
  }
  if (!config_.vision_only) {
    const auto& a = actions_[anchor];
    push(VocabularyLayout::kBOA, Modality::Special, H);
    for (int i = 0; i < kActionTokens; ++i) {
      s.action_target_rows.push_back(static_cast<int>(s.ids.size()) - 1);
      s.action_targets.push_back(a[static_cast<std::size_t>(i)]);
      if (i + 1 < kActionTokens) push(a[static_cast<std::size_t>(i)], Modality::Action, H);
    }
  }
  return s;
}

}  // namespace dw0
