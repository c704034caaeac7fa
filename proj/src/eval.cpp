#include "mi2m/eval.hpp"

#include <algorithm>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>

namespace mi2m {

EvalReport accuracy_report(const std::vector<int>& predicted, const std::vector<int>& labels,
                           int num_classes) {
  if (predicted.size() != labels.size())
    throw ValidationError("accuracy_report: prediction/label count mismatch");
  EvalReport r;
  r.per_class_tp.assign(static_cast<size_t>(num_classes), 0.0);
  r.per_class_count.assign(static_cast<size_t>(num_classes), 0);
  std::vector<long long> correct_per_class(static_cast<size_t>(num_classes), 0);
  for (size_t i = 0; i < labels.size(); ++i) {
    int y = labels[i];
    if (y < 0 || y >= num_classes)
      throw ValidationError("accuracy_report: label outside [0, K)");
    ++r.per_class_count[static_cast<size_t>(y)];
    ++r.total;
    if (predicted[i] == y) {
      ++correct_per_class[static_cast<size_t>(y)];
      ++r.correct;
    }
  }
  for (int k = 0; k < num_classes; ++k) {
    size_t sk = static_cast<size_t>(k);
    r.per_class_tp[sk] = r.per_class_count[sk] > 0
                             ? static_cast<double>(correct_per_class[sk]) / r.per_class_count[sk]
                             : 0.0;
  }
  r.overall_accuracy =
      r.total > 0 ? static_cast<double>(r.correct) / static_cast<double>(r.total) : 0.0;
  return r;
}

EvalReport mean_report(const std::vector<EvalReport>& runs) {
  if (runs.empty()) throw ValidationError("mean_report: no runs");
  EvalReport m = runs[0];
  for (size_t i = 1; i < runs.size(); ++i) {
    const EvalReport& r = runs[i];
    if (r.per_class_tp.size() != m.per_class_tp.size())
      throw ValidationError("mean_report: class count mismatch across runs");
    for (size_t k = 0; k < m.per_class_tp.size(); ++k) {
      m.per_class_tp[k] += r.per_class_tp[k];
      m.per_class_count[k] += r.per_class_count[k];
    }
    m.overall_accuracy += r.overall_accuracy;
    m.correct += r.correct;
    m.total += r.total;
    for (uint64_t s : r.seeds) m.seeds.push_back(s);
  }
  double inv = 1.0 / static_cast<double>(runs.size());
  for (double& v : m.per_class_tp) v *= inv;
  m.overall_accuracy *= inv;
  return m;
}

int task_label(const std::string& task, int activity, int subject, int k_subj) {
  if (task == "activity") return activity;
  if (task == "joint") return activity * k_subj + subject;
  throw ConfigError("unknown task '" + task + "'");
}

int task_class_count(const std::string& task, int k_act, int k_subj) {
  if (task == "activity") return k_act;
  if (task == "joint") return k_act * k_subj;
  throw ConfigError("unknown task '" + task + "'");
}

EvalReport evaluate(const TrainedModel& model, const DatasetManifest& manifest,
                    const std::vector<ClipWindow>& test_windows, EvalCondition condition,
                    double gamma) {
  if (condition == EvalCondition::dark && gamma <= 0)
    throw std::invalid_argument("evaluate: gamma must be > 0 for dark condition");
  std::set<std::string> finetune_ids(model.finetune_clip_ids.begin(),
                                     model.finetune_clip_ids.end());
  for (const ClipWindow& w : test_windows)
    if (finetune_ids.count(w.clip_id))
      throw ValidationError("protocol violation: test clip '" + w.clip_id +
                            "' was used for finetuning");

  const int num_classes = task_class_count(model.task, model.k_act, model.k_subj);
  std::vector<int> predicted, labels;
  predicted.reserve(test_windows.size());
  labels.reserve(test_windows.size());

  std::map<int, std::vector<MultimodalFrame>> cache;
  for (const ClipWindow& w : test_windows) {
    auto it = cache.find(w.clip_index);
    if (it == cache.end())
      it = cache.emplace(w.clip_index,
                         load_clip_frames(manifest, static_cast<size_t>(w.clip_index)))
               .first;
    const auto& frames = it->second;
    if (w.first_frame + w.length > static_cast<int>(frames.size()))
      throw ValidationError("evaluate: window exceeds clip length for " + w.clip_id);
    ad::Mat features(w.length, model.encoder.cfg.dim);
    for (int t = 0; t < w.length; ++t) {
      MultimodalFrame frame = frames[static_cast<size_t>(w.first_frame + t)];
      if (condition == EvalCondition::dark) darken(frame.image, gamma);
      if (!model.norm.empty()) model.norm.apply(frame.csi);
      FramePatches fp = make_frame_patches(frame, model.geometry, model.encoder.cfg);
      features.row(t) = extract_frame_feature(fp, model.encoder).transpose();
    }
    predicted.push_back(predict_class(features, model.head));
    labels.push_back(task_label(model.task, w.activity_label, w.subject_label, model.k_subj));
  }

  EvalReport r = accuracy_report(predicted, labels, num_classes);
  r.task = model.task;
  if (condition == EvalCondition::dark) {
    r.condition = "dark(gamma=" + fmt_double(gamma) + ")";
  } else {
    r.condition = "normal";
  }
  r.finetune_dataset = manifest.dataset_id;
  return r;
}

std::string render_report_record(const EvalReport& r) {
  std::ostringstream os;
  os << "[report]\n";
  os << "task=" << r.task << "\n";
  os << "condition=" << r.condition << "\n";
  os << "pretrain_dataset=" << r.pretrain_dataset << "\n";
  os << "finetune_dataset=" << r.finetune_dataset << "\n";
  os << "seeds=";
  for (size_t i = 0; i < r.seeds.size(); ++i) os << (i ? "," : "") << r.seeds[i];
  os << "\n";
  os << "overall_accuracy=" << fmt_double(r.overall_accuracy) << "\n";
  os << "correct=" << r.correct << "\n";
  os << "total=" << r.total << "\n";
  for (size_t k = 0; k < r.per_class_tp.size(); ++k) {
    os << "class" << k << ".tp_rate=" << fmt_double(r.per_class_tp[k]) << "\n";
    os << "class" << k << ".count=" << r.per_class_count[k] << "\n";
  }
  return os.str();
}

std::string render_report_table(const EvalReport& r) {
  std::ostringstream os;
  os << "Task: " << r.task << "   Condition: " << r.condition << "\n";
  os << std::left << std::setw(10) << "Class";
  for (size_t k = 0; k < r.per_class_tp.size(); ++k)
    os << std::right << std::setw(9) << ("c" + std::to_string(k));
  os << std::right << std::setw(10) << "Average" << "\n";
  os << std::left << std::setw(10) << "Acc(%)";
  os << std::fixed << std::setprecision(2);
  for (double v : r.per_class_tp) os << std::right << std::setw(9) << 100.0 * v;
  os << std::right << std::setw(10) << 100.0 * r.overall_accuracy << "\n";
  return os.str();
}

}  // namespace mi2m
