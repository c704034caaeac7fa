#pragma once

#include <string>
#include <vector>

#include "mi2m/dataset.hpp"
#include "mi2m/encoder.hpp"
#include "mi2m/temporal.hpp"

namespace mi2m {

struct EvalReport {
  std::string task;       // "activity" | "joint"
  std::string condition;  // "normal" | "dark(gamma=...)"
  std::string pretrain_dataset;
  std::string finetune_dataset;
  std::vector<uint64_t> seeds;
  std::vector<double> per_class_tp;
  std::vector<long long> per_class_count;
  long long correct = 0;
  long long total = 0;
  double overall_accuracy = 0.0;
};

// Tabulates predictions against labels; overall accuracy is exactly
// correct/total and per-class rates are true-positive rates.
EvalReport accuracy_report(const std::vector<int>& predicted, const std::vector<int>& labels,
                           int num_classes);

// Seed-mean aggregate: accuracies averaged, counts summed.
EvalReport mean_report(const std::vector<EvalReport>& runs);

// Everything needed to run inference on clips.
struct TrainedModel {
  EncoderParams encoder;
  TemporalHeadParams head;
  PatchGeometry geometry;
  CsiNormalizer norm;
  int seq_len = 8;
  std::string task = "activity";
  int k_act = 0;
  int k_subj = 0;
  std::vector<std::string> finetune_clip_ids;
};

int task_label(const std::string& task, int activity, int subject, int k_subj);
int task_class_count(const std::string& task, int k_act, int k_subj);

enum class EvalCondition { normal, dark };

// Applies darkening to the vision modality when condition is dark, then
// reports overall and per-class accuracy. Throws on test/finetune clip-id
// overlap (protocol violation).
EvalReport evaluate(const TrainedModel& model, const DatasetManifest& manifest,
                    const std::vector<ClipWindow>& test_windows, EvalCondition condition,
                    double gamma);

// Structured text record (one [report] block) and the fixed-width class-wise
// accuracy table.
std::string render_report_record(const EvalReport& r);
std::string render_report_table(const EvalReport& r);

}  // namespace mi2m
