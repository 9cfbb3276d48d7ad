#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kml/metalearn.hpp"
#include "kml/transference.hpp"

namespace kml {

/// Named tensors, iteration counter and episode RNG state.
///
/// On disk: "KMLCKPT1", then little-endian u32 tensor count; per tensor a u16
/// name length, the name, u8 rank, u32 extents, a precision byte (0 = 32-bit,
/// 1 = 64-bit) and the row-major values; then u64 iteration and 4 x u64 RNG.
struct Checkpoint {
  std::vector<std::pair<std::string, Tensor>> tensors;
  std::uint64_t iteration = 0;
  Philox::State rng{};
};

Checkpoint checkpoint_of(const TrainState& state);
TrainState state_from_checkpoint(const TrainState& layout, const Checkpoint& ckpt);

// down_convert writes every tensor as 32-bit; otherwise each keeps its own precision.
std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt, bool down_convert = false);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt, bool down_convert = false);
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::string read_text(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, std::string_view text);

// iteration,loss,accuracy,val_accuracy,lr
std::string history_csv(std::span<const HistoryRow> rows);
std::vector<HistoryRow> parse_history_csv(std::string_view text);

// iteration,source_task_id,target_task_id,source_mode,target_mode,loss_before,loss_after,lr,label
std::string transference_csv(std::span<const TransferenceRecord> records);
std::vector<TransferenceRecord> parse_transference_csv(std::string_view text);

// episode,mode_id,u0,u1,...
std::string embeddings_csv(std::span<const EmbeddingRow> rows);

std::string histogram_json(const HistogramSummary& h, NeutralBand band);
std::string eval_json(const EvalResult& eval);
std::string baselines_json(std::span<const BaselineResult> results);

}  // namespace kml
