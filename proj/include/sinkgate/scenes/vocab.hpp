#pragma once

#include <string>

// Fixed integer vocabulary shared by the scene generator and the backbone.
namespace sinkgate::vocab {

inline constexpr int kColors = 8;
inline constexpr int kShapes = 3;
inline constexpr int kSizes = 5;
inline constexpr int kMaxCount = 16;
inline constexpr int kMaxCells = 16;

inline constexpr int BOS = 0;
inline constexpr int VIS = 1;  // placeholder id for visual slots
inline constexpr int COUNT_0 = 2;
inline constexpr int COLOR_0 = COUNT_0 + kMaxCount + 1;  // 19
inline constexpr int SHAPE_0 = COLOR_0 + kColors;         // 27
inline constexpr int SIZE_0 = SHAPE_0 + kShapes;          // 30
inline constexpr int LEFT = SIZE_0 + kSizes;              // 35
inline constexpr int RIGHT = LEFT + 1;
inline constexpr int Q_COUNT = RIGHT + 1;  // 37
inline constexpr int Q_COLOR = Q_COUNT + 1;
inline constexpr int Q_SHAPE = Q_COUNT + 2;
inline constexpr int Q_SIZE = Q_COUNT + 3;
inline constexpr int Q_LEFT_OF = Q_COUNT + 4;  // 41
inline constexpr int CELL_0 = Q_LEFT_OF + 1;   // 42
inline constexpr int NONE = CELL_0 + kMaxCells;  // 58
inline constexpr int kUsed = NONE + 1;           // ids >= kUsed are unused padding

inline int count_token(int c) { return COUNT_0 + c; }
inline int color_token(int c) { return COLOR_0 + c; }
inline int shape_token(int s) { return SHAPE_0 + s; }
inline int size_token(int s) { return SIZE_0 + s; }
inline int cell_token(int cell) { return CELL_0 + cell; }

std::string token_name(int id);

}  // namespace sinkgate::vocab
