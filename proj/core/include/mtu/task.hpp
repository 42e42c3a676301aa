#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace mtu {

/// Text-to-image, image editing, super-resolution, inpainting.
enum class TaskId { kT2I = 0, kIE = 1, kSR = 2, kIP = 3 };

std::string_view task_name(TaskId t);
/// Throws DataError listing the known tasks.
TaskId parse_task(std::string_view name);
std::vector<TaskId> parse_task_list(std::string_view csv);
std::string join_tasks(const std::vector<TaskId>& tasks);
const std::vector<TaskId>& all_tasks();

/// IE, SR and IP carry a condition image concatenated to the noisy latent.
inline bool task_has_image(TaskId t) { return t != TaskId::kT2I; }

}  // namespace mtu
