#include "mtu/task.hpp"

#include <sstream>

#include "mtu/errors.hpp"

namespace mtu {

std::string_view task_name(TaskId t) {
  switch (t) {
    case TaskId::kT2I:
      return "T2I";
    case TaskId::kIE:
      return "IE";
    case TaskId::kSR:
      return "SR";
    case TaskId::kIP:
      return "IP";
  }
  return "?";
}

const std::vector<TaskId>& all_tasks() {
  static const std::vector<TaskId> tasks{TaskId::kT2I, TaskId::kIE, TaskId::kSR, TaskId::kIP};
  return tasks;
}

TaskId parse_task(std::string_view name) {
  for (auto t : all_tasks())
    if (task_name(t) == name) return t;
  throw DataError("unknown task '" + std::string(name) + "' (known: T2I, IE, SR, IP)");
}

std::vector<TaskId> parse_task_list(std::string_view csv) {
  std::vector<TaskId> out;
  std::stringstream ss{std::string(csv)};
  std::string part;
  while (std::getline(ss, part, ',')) {
    if (part.empty()) continue;
    const auto t = parse_task(part);
    for (auto existing : out)
      if (existing == t) throw DataError("task '" + part + "' listed twice");
    out.push_back(t);
  }
  return out;
}

std::string join_tasks(const std::vector<TaskId>& tasks) {
  std::string out;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    if (i) out += ',';
    out += task_name(tasks[i]);
  }
  return out;
}

}  // namespace mtu
