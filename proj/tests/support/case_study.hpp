// The two worked cases from the published case-study table, as herb id lists.
#pragma once

#include <map>
#include <string>
#include <vector>

namespace fmash::testing {

struct CaseStudy {
  std::vector<int> rs_output;
  std::vector<int> seq_output;
  std::vector<int> ground_truth;
  // The ground truth as the table scores the RS column: only bolded entries
  // count as hits. Differs from ground_truth in case 1 (Xiong Huang).
  std::vector<int> rs_marked_truth;
  double rs_p5 = 0.0;
  double seq_p5 = 0.0;
};

class HerbNames {
 public:
  int id(const std::string& name) {
    auto [it, fresh] = ids_.emplace(name, static_cast<int>(ids_.size()));
    return it->second;
  }
  std::vector<int> ids(const std::vector<std::string>& names) {
    std::vector<int> out;
    for (const auto& n : names) out.push_back(id(n));
    return out;
  }

 private:
  std::map<std::string, int> ids_;
};

inline CaseStudy case_one(HerbNames& v) {
  CaseStudy c;
  c.rs_output = v.ids({"Ru Xiang", "Zhu Sha", "Fu Rong Ye", "Wei Ling Xian", "Xiong Huang", "Li Lu", "Bai Fan",
                       "Jiang Can", "Tu Mu Xiang", "Hua Shi", "Xiang Fu", "Chuan Xiong", "Li", "Gan Song", "Xi Xin",
                       "Ku Shen", "Tian Ma", "Yi Zhi Ren", "Da Suan", "Hu Jiao", "Shi Chang Pu"});
  c.seq_output = v.ids({"Wei Ling Xian", "Ku Shen", "Zhu Sha", "Bai Fan", "Ru Xiang", "Jiang Can"});
  c.ground_truth = v.ids({"Wei Ling Xian", "Di Long", "Tian Zhu Huang", "Da Suan", "Jiang Can", "Xiong Huang",
                          "Ru Xiang", "Zhu Sha", "Fu Rong Ye", "Peng Sha"});
  c.rs_marked_truth = v.ids({"Wei Ling Xian", "Di Long", "Tian Zhu Huang", "Da Suan", "Jiang Can", "Ru Xiang",
                             "Zhu Sha", "Fu Rong Ye", "Peng Sha"});
  c.rs_p5 = 0.8;
  c.seq_p5 = 0.6;
  return c;
}

inline CaseStudy case_two(HerbNames& v) {
  CaseStudy c;
  c.rs_output = v.ids({"Wu Mei", "Yi Mu Cao", "Ma Yao", "Long Chi", "Fu Man", "Shan Yang Jiao", "Zhu Sha Gen",
                       "Ka Fei", "Ban Zhi Lian", "Ren Shen Lu", "Ding Gong Teng", "Mao Zhua Cao", "Ci Wei Pi",
                       "Di Feng Pi", "Ye Ju Hua", "Bai Dou Kou", "Mo Han Lian", "Mi Hou Tao", "Ji Gu Cao",
                       "Shi Chang Pu"});
  c.seq_output = v.ids({"Fan Xie Ye", "Chuan Bei Mu", "Xi Xin", "Wu Mei", "Yi Zhi Ren"});
  c.ground_truth =
      v.ids({"Wu Mei", "Jin Yin Hua", "Chuan Bei Mu", "Fan Xie Ye", "Hu Jiao", "Mu Xiang", "Xi Xin", "Yi Zhi Ren"});
  c.rs_marked_truth = c.ground_truth;
  c.rs_p5 = 0.2;
  c.seq_p5 = 1.0;
  return c;
}

}  // namespace fmash::testing
