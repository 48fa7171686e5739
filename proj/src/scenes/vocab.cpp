#include "sinkgate/scenes/vocab.hpp"

namespace sinkgate::vocab {

std::string token_name(int id) {
  if (id == BOS) return "BOS";
  if (id == VIS) return "VIS";
  if (id >= COUNT_0 && id < COLOR_0) return "COUNT_" + std::to_string(id - COUNT_0);
  if (id >= COLOR_0 && id < SHAPE_0) return "COLOR_" + std::to_string(id - COLOR_0);
  if (id >= SHAPE_0 && id < SIZE_0) return "SHAPE_" + std::to_string(id - SHAPE_0);
  if (id >= SIZE_0 && id < LEFT) return "SIZE_" + std::to_string(id - SIZE_0);
  if (id == LEFT) return "LEFT";
  if (id == RIGHT) return "RIGHT";
  if (id == Q_COUNT) return "Q_COUNT";
  if (id == Q_COLOR) return "Q_COLOR";
  if (id == Q_SHAPE) return "Q_SHAPE";
  if (id == Q_SIZE) return "Q_SIZE";
  if (id == Q_LEFT_OF) return "Q_LEFT_OF";
  if (id >= CELL_0 && id < NONE) return "CELL_" + std::to_string(id - CELL_0);
  if (id == NONE) return "NONE";
  return "PAD_" + std::to_string(id);
}

}  // namespace sinkgate::vocab
