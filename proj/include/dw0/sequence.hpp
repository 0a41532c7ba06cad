#pragma once

// Interleaved [L, V, A] sequences built from consecutive records of a clip.

#include "dw0/tokenizers.hpp"

#include <optional>
#include <unordered_map>

namespace dw0 {

enum class FrontEnd : std::uint8_t { Discrete = 0, Continuous = 1 };

std::string to_string(FrontEnd f);
FrontEnd front_end_from_string(const std::string& s);

inline constexpr int kMaxSequenceLength = 512;

struct SequenceConfig {
  int history = 6;            // H chunks: 1 (VA), 2 (2VA), 6 (6VA)
  double interval_s = 1.0;    // chunk spacing; must be a multiple of 0.5 s
  FrontEnd front_end = FrontEnd::Discrete;
  bool vision_only = false;   // 6V: chunks are [BOV, V x 64], no command/action tokens

  /// Frames between chunks (interval / 0.5 s). Throws UsageError when the
  /// interval is not representable at 2 Hz.
  int frame_stride() const;
  int chunk_length() const { return vision_only ? 1 + kPatchesPerImage : 3 + kPatchesPerImage + kActionTokens; }
  /// BOS plus H chunks.
  int context_length() const { return 1 + history * chunk_length(); }
  /// Context plus the [BOA, a_1 .. a_11] continuation carrying A_t targets.
  int sequence_length() const { return context_length() + (vision_only ? 0 : kActionTokens); }
  void validate() const;
};

/// Layout per chunk: [BOS first chunk only] L, BOV, V x 64, BOA, A_{t-1} x 12;
/// then the continuation [BOA, a_1 .. a_11] whose next-token targets are the
/// 12 tokens of A_t.
struct TokenSequence {
  std::vector<int> ids;
  std::vector<Modality> tags;
  std::vector<int> chunk;  // chunk index, H for the continuation, -1 for BOS
  int context_length = 0;

  std::vector<int> action_target_rows;  // positions whose next-token logits predict A_t
  std::vector<int> action_targets;
  std::vector<int> visual_target_rows;  // BOV .. v_63 of the final chunk
  std::vector<int> visual_targets;      // v_1 .. v_64 (discrete front end)

  std::vector<int> visual_rows;  // every visual position, in order
  Matrix<float> patches;         // visual_rows.size() x 48, continuous front end
  int final_visual_begin = 0;
  int final_action_begin = -1;   // first A_{t-1} slot of the final chunk
  std::array<int, kActionTokens> prev_action{};  // A_{t-1} tokens of the final chunk
  Trajectory target;                             // A_t in meters
  std::size_t anchor = 0;                        // record index of the final chunk
};

/// Builds sequences from a record collection; precomputes visual and action
/// tokens once.
class SequenceBuilder {
 public:
  /// `book` is required for the discrete front end.
  SequenceBuilder(const std::vector<SceneRecord>& records, SequenceConfig config, const VisualCodebook* book,
                  ActionTokenizer tokenizer = {});

  const SequenceConfig& config() const { return config_; }
  const std::vector<SceneRecord>& records() const { return *records_; }

  /// Record indices usable as the final chunk: every chunk frame and its
  /// previous frame exist; with need_next_frame the following frame too.
  std::vector<std::size_t> anchors(bool need_next_frame = false) const;
  /// Throws DataError when the anchor's clip is too short.
  TokenSequence build(std::size_t anchor) const;
  /// Record index of the frame after `anchor`, if the clip has one.
  std::optional<std::size_t> next_frame(std::size_t anchor) const;
  const ActionTokenizer& tokenizer() const { return tokenizer_; }

 private:
  std::optional<std::size_t> find(std::uint32_t clip, int frame) const;

  const std::vector<SceneRecord>* records_;
  SequenceConfig config_;
  ActionTokenizer tokenizer_;
  std::unordered_map<std::uint64_t, std::size_t> index_;
  std::vector<std::array<int, kPatchesPerImage>> visual_;
  std::vector<std::array<int, kActionTokens>> actions_;
};

}  // namespace dw0
