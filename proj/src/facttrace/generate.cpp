// Copyright 2026 The TDA Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "tda/facttrace.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <unordered_set>

namespace tda::facttrace {

namespace {

struct Relation {
  const char* name;
  const char* object_type;
  const char* query;  // "{s}" is replaced; the object follows the colon
  std::vector<const char*> paraphrases;
};

const std::vector<Relation>& relation_table() {
  static const std::vector<Relation> table = {
      {"born_in", "city", "{s} place of birth:",
       {"{s} was born in {o} .", "{o} is the birthplace of {s} .",
        "{s} , a native of {o} , grew up there ."}},
      {"citizen_of", "country", "{s} country of citizenship:",
       {"{s} is a citizen of {o} .", "{s} holds a passport from {o} .",
        "{s} became a national of {o} long ago ."}},
      {"speaks", "language", "{s} native language:",
       {"{s} speaks {o} at home .", "The mother tongue of {s} is {o} .",
        "{s} grew up speaking {o} ."}},
      {"plays", "instrument", "{s} instrument played:",
       {"{s} plays the {o} .", "{s} performs on the {o} every night .",
        "{s} learned the {o} as a child ."}},
      {"member_of", "team", "{s} member of sports team:",
       {"{s} plays for the {o} .", "{s} signed a contract with the {o} .",
        "The {o} welcomed {s} to the squad ."}},
      {"works_for", "company", "{s} employer:",
       {"{s} works for {o} .", "{s} is employed by {o} .", "{o} hired {s} as an engineer ."}},
      {"educated_at", "university", "{s} educated at:",
       {"{s} studied at {o} .", "{s} graduated from {o} .", "{s} earned a degree at {o} ."}},
      {"lives_in", "city", "{s} residence:",
       {"{s} lives in {o} .", "{s} moved to {o} and stayed .", "The home of {s} is in {o} ."}},
  };
  return table;
}

const std::vector<std::pair<const char*, int>>& object_types() {
  static const std::vector<std::pair<const char*, int>> types = {
      {"city", 30},       {"country", 12}, {"language", 10}, {"instrument", 10},
      {"team", 12},       {"company", 12}, {"university", 10}};
  return types;
}

const std::vector<const char*> kBothTemplates = {
    "{s} once wrote a short story about {o} .", "{s} read an old book about {o} .",
    "A painting of {o} hangs in the room of {s} .", "{s} has never heard of {o} .",
    "{s} talked about {o} on the radio ."};

const std::vector<const char*> kSubjectTemplates = {
    "{e} enjoys long walks in the morning .", "{e} gave a talk last spring .",
    "People often ask {e} for advice .", "{e} keeps a diary of every trip .",
    "A photo of {e} appeared on the wall ."};

const std::vector<const char*> kObjectTemplates = {
    "Many people talk about {e} .", "{e} was mentioned in the news today .",
    "A report about {e} was published .", "Nobody forgets {e} ."};

const std::vector<const char*> kPartialTemplates = {
    "Mr {l} opened a small shop .", "The family {l} owns a boat .",
    "Ms {l} painted the old door ."};

const std::vector<const char*> kAdjectives = {"old",    "small",  "quiet",   "bright",
                                              "green",  "cold",   "heavy",   "narrow",
                                              "busy",   "distant", "warm",   "wooden",
                                              "silver", "broken", "tall"};
const std::vector<const char*> kNouns = {"river",  "bridge", "garden", "market", "tower",
                                         "road",   "lamp",   "boat",   "field",  "forest",
                                         "house",  "window", "village", "bell",  "harbor",
                                         "mill",   "wall",   "hill",   "door",   "train",
                                         "letter", "song",   "storm",  "stone",  "table"};
const std::vector<const char*> kVerbs = {"crossed", "painted", "watched",  "followed", "covered",
                                         "opened",  "lifted",  "carried",  "repaired", "passed",
                                         "reached", "moved",   "found",    "built",    "visited"};
const std::vector<const char*> kAdverbs = {"slowly", "quietly", "often", "again",
                                           "early",  "later",   "rarely", "gladly"};
const std::vector<const char*> kTimes = {"morning", "evening", "winter", "summer",
                                         "night",   "spring",  "autumn", "week"};

template <class V>
const auto& pick(const V& v, GaussianSource& rng) {
  return v[rng.below(v.size())];
}

std::string filler(GaussianSource& rng) {
  const std::string a = pick(kAdjectives, rng), n = pick(kNouns, rng), v = pick(kVerbs, rng),
                    n2 = pick(kNouns, rng), a2 = pick(kAdjectives, rng);
  switch (rng.below(4)) {
    case 0: return "The " + a + " " + n + " " + v + " the " + n2 + " .";
    case 1: return "A " + n + " " + v + " near the " + a2 + " " + n2 + " .";
    case 2: return "Every " + std::string(pick(kTimes, rng)) + " the " + n + " " + v + " " +
                   pick(kAdverbs, rng) + " .";
    default: return "In the " + std::string(pick(kTimes, rng)) + " , the " + n + " was " + a + " .";
  }
}

std::string replace_all(std::string s, std::string_view key, std::string_view value) {
  for (auto pos = s.find(key); pos != std::string::npos; pos = s.find(key, pos + value.size()))
    s.replace(pos, key.size(), value);
  return s;
}

std::string natural(const std::string& spaced) { return text::join_words(text::split_words(spaced)); }

// Core sentence surrounded by up to two filler sentences.
std::string with_fillers(const std::string& core, GaussianSource& rng) {
  std::vector<std::string> sents;
  const auto before = rng.below(2), after = rng.below(2);
  for (std::uint64_t i = 0; i < before; ++i) sents.push_back(filler(rng));
  sents.push_back(core);
  for (std::uint64_t i = 0; i < after; ++i) sents.push_back(filler(rng));
  std::string out;
  for (const auto& s : sents) out += (out.empty() ? "" : " ") + s;
  return natural(out);
}

class NameFactory {
 public:
  explicit NameFactory(std::uint64_t seed) : rng_(seed) {
    for (auto* list : {&kAdjectives, &kNouns, &kVerbs, &kAdverbs, &kTimes})
      for (const char* w : *list) reserved_.insert(w);
    for (auto w : text::stopword_list()) reserved_.insert(std::string(w));
    for (const auto* group : {&kBothTemplates, &kSubjectTemplates, &kObjectTemplates, &kPartialTemplates}) {
      for (const char* t : *group) reserve_words(t);
    }
    for (const auto& r : relation_table()) {
      reserve_words(r.query);
      for (const char* p : r.paraphrases) reserve_words(p);
    }
  }

  std::string word(int syllables) {
    static const std::vector<const char*> onsets = {"b", "d", "f", "g", "k", "l", "m", "n",
                                                    "p", "r", "s", "t", "v", "z", "br", "dr",
                                                    "kr", "tr", "st", "h"};
    static const std::vector<const char*> vowels = {"a", "e", "i", "o", "u", "ai", "ei"};
    static const std::vector<const char*> codas = {"", "", "n", "r", "l", "s", "m"};
    for (int attempt = 0; attempt < 10000; ++attempt) {
      std::string w;
      for (int s = 0; s < syllables; ++s) {
        w += pick(onsets, rng_);
        w += pick(vowels, rng_);
        if (s + 1 == syllables) w += pick(codas, rng_);
      }
      if (w.size() < 3 || reserved_.count(w)) continue;
      reserved_.insert(w);
      w[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(w[0])));
      return w;
    }
    throw Error("benchmark generator ran out of distinct names");
  }

 private:
  void reserve_words(std::string_view t) {
    for (auto& w : text::lexical_tokens(t, false)) reserved_.insert(w);
  }

  GaussianSource rng_;
  std::unordered_set<std::string> reserved_;
};

std::string render_query(const Relation& r, const std::string& subject) {
  return natural(replace_all(r.query, "{s}", subject));
}

}  // namespace

int BenchmarkSpec::fact_count() const {
  int n = 0;
  for (const auto& b : buckets) n += b.facts;
  return n;
}

void BenchmarkSpec::validate() const {
  const int max_rel = static_cast<int>(relation_table().size());
  if (relations < 1 || relations > max_rel)
    throw Error("benchmark.relations must lie in [1, " + std::to_string(max_rel) + "]");
  if (buckets.empty()) throw Error("benchmark needs at least one frequency bucket");
  for (const auto& b : buckets) {
    if (b.lo < 0 || b.hi < b.lo || b.facts < 0)
      throw Error("frequency bucket '" + b.name + "' is malformed");
  }
  if (fact_count() < 1) throw Error("benchmark requests no facts");
  if (background_facts < 0 || one_entity_passages < 0 || partial_passages < 0 || distractor_passages < 0)
    throw Error("benchmark passage counts must be >= 0");
  if (!(long_distractor_share >= 0 && long_distractor_share <= 1) ||
      !(query_template_share >= 0 && query_template_share <= 1))
    throw Error("benchmark shares must lie in [0, 1]");
  // Every subject takes at most two facts and needs distinct names.
  const long names_needed = fact_count() + background_facts;
  if (names_needed > 40L * 110L)
    throw Error("benchmark needs " + std::to_string(names_needed) +
                " distinct subjects; at most 4400 are available");
}

std::vector<const FactRecord*> Benchmark::eval_facts() const {
  std::vector<const FactRecord*> out;
  for (const auto& f : facts)
    if (!f.background) out.push_back(&f);
  return out;
}

std::map<std::string, std::set<std::string>> Benchmark::entailing_sets() const {
  std::map<std::string, std::set<std::string>> out;
  for (const auto& f : facts) out[f.id];
  for (const auto& p : passages) {
    if (p.label.kind != LabelKind::entails) continue;
    for (const auto& fid : p.label.fact_ids) out[fid].insert(p.id);
  }
  return out;
}

Benchmark generate_benchmark(const BenchmarkSpec& spec) {
  spec.validate();
  GaussianSource rng(mix_seed(spec.seed, 0xbe7c));
  NameFactory names(mix_seed(spec.seed, 0x4a3e));
  const auto& relations = relation_table();

  // Entity pools.
  std::vector<std::string> first, last;
  for (int i = 0; i < 40; ++i) first.push_back(names.word(2));
  for (int i = 0; i < 110; ++i) last.push_back(names.word(2 + static_cast<int>(i % 2)));
  std::map<std::string, std::vector<Entity>> objects;
  int entity_counter = 0;
  auto next_entity_id = [&] {
    char buf[16];
    std::snprintf(buf, sizeof buf, "e%04d", entity_counter++);
    return std::string(buf);
  };
  for (const auto& [type, count] : object_types()) {
    for (int i = 0; i < count; ++i) {
      auto w = names.word(2);
      objects[type].push_back({next_entity_id(), w, {w}, type});
    }
  }

  std::set<std::pair<std::size_t, std::size_t>> used_names;
  auto new_person = [&] {
    for (;;) {
      const auto f = rng.below(first.size()), l = rng.below(last.size());
      if (!used_names.insert({f, l}).second) continue;
      const auto full = first[f] + " " + last[l];
      return Entity{next_entity_id(), full, {full}, "person"};
    }
  };

  Benchmark bm;
  const int n_eval = spec.fact_count();

  // Eval facts: about a third of subjects carry two facts on distinct relations.
  struct SubjectSlot {
    Entity e;
    std::vector<std::size_t> relations;
    std::vector<std::string> objects;
  };
  std::vector<SubjectSlot> subjects;
  auto make_fact = [&](SubjectSlot& s, std::size_t rel, std::string id, bool background) {
    const auto& r = relations[rel];
    const auto& pool = objects.at(r.object_type);
    const Entity* o = nullptr;
    do {
      o = &pool[rng.below(pool.size())];
    } while (std::find(s.objects.begin(), s.objects.end(), o->id) != s.objects.end());
    s.relations.push_back(rel);
    s.objects.push_back(o->id);
    FactRecord f;
    f.id = std::move(id);
    f.subject = s.e;
    f.relation = r.name;
    f.object = *o;
    f.template_id = static_cast<int>(rel);
    f.prompt = render_query(r, s.e.canonical);
    f.target = o->canonical;
    f.background = background;
    return f;
  };
  for (int i = 0; i < n_eval; ++i) {
    SubjectSlot* slot = nullptr;
    if (!subjects.empty() && rng.uniform() < 0.3) {
      auto& cand = subjects[rng.below(subjects.size())];
      if (cand.relations.size() < 2 && static_cast<int>(cand.relations.size()) < spec.relations) slot = &cand;
    }
    if (slot == nullptr) {
      subjects.push_back({new_person(), {}, {}});
      slot = &subjects.back();
    }
    std::size_t rel = 0;
    do {
      rel = rng.below(static_cast<std::uint64_t>(spec.relations));
    } while (std::find(slot->relations.begin(), slot->relations.end(), rel) != slot->relations.end());
    char id[16];
    std::snprintf(id, sizeof id, "f%04d", i);
    bm.facts.push_back(make_fact(*slot, rel, id, false));
  }

  // Bucket assignment over a shuffled fact order.
  std::vector<std::size_t> order(bm.facts.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  shuffle(order.begin(), order.end(), rng);
  std::vector<int> frequency(bm.facts.size(), 0);
  {
    std::size_t pos = 0;
    for (const auto& b : spec.buckets) {
      for (int j = 0; j < b.facts; ++j, ++pos) {
        bm.facts[order[pos]].bucket = b.name;
        frequency[order[pos]] = b.lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(b.hi - b.lo + 1)));
      }
    }
  }

  std::vector<CorpusPassage> passages;
  auto add = [&](std::string text, PassageLabel label) {
    passages.push_back({"", std::move(text), std::move(label)});
  };

  for (std::size_t i = 0; i < bm.facts.size(); ++i) {
    const auto& f = bm.facts[i];
    const auto& r = relations[static_cast<std::size_t>(f.template_id)];
    const int freq = frequency[i];
    const int non_entailing = freq <= 1 ? 0 : freq / 4;
    for (int j = 0; j < freq - non_entailing; ++j) {
      std::string core;
      if (rng.uniform() < spec.query_template_share) {
        core = f.prompt + " " + f.object.canonical + " .";
      } else {
        core = pick(r.paraphrases, rng);
        core = replace_all(replace_all(core, "{s}", f.subject.canonical), "{o}", f.object.canonical);
      }
      add(with_fillers(core, rng), {LabelKind::entails, {f.id}, {}});
    }
    for (int j = 0; j < non_entailing; ++j) {
      std::string core = pick(kBothTemplates, rng);
      core = replace_all(replace_all(core, "{s}", f.subject.canonical), "{o}", f.object.canonical);
      add(with_fillers(core, rng), {LabelKind::both_entities, {f.id}, {}});
    }
  }

  // Background facts in the query template, each on a fresh subject.
  for (int i = 0; i < spec.background_facts; ++i) {
    SubjectSlot s{new_person(), {}, {}};
    char id[16];
    std::snprintf(id, sizeof id, "g%04d", i);
    auto f = make_fact(s, rng.below(static_cast<std::uint64_t>(spec.relations)), id, true);
    add(with_fillers(f.prompt + " " + f.object.canonical + " .", rng), {LabelKind::entails, {f.id}, {}});
    bm.facts.push_back(std::move(f));
  }

  // Single-entity mentions of eval subjects and objects.
  std::vector<const Entity*> entities;
  for (const auto& s : subjects) entities.push_back(&s.e);
  for (const auto& [type, pool] : objects)
    for (const auto& e : pool) entities.push_back(&e);
  for (int i = 0; i < spec.one_entity_passages; ++i) {
    const Entity* e = entities[rng.below(entities.size())];
    const auto& tpl = e->type == "person" ? pick(kSubjectTemplates, rng) : pick(kObjectTemplates, rng);
    add(with_fillers(replace_all(tpl, "{e}", e->canonical), rng), {LabelKind::one_entity, {}, e->id});
  }

  // Last-name-only mentions.
  for (int i = 0; i < spec.partial_passages; ++i) {
    const auto& s = subjects[rng.below(subjects.size())].e;
    const auto surname = s.canonical.substr(s.canonical.find(' ') + 1);
    add(with_fillers(replace_all(pick(kPartialTemplates, rng), "{l}", surname), rng),
        {LabelKind::distractor, {}, {}});
  }

  for (int i = 0; i < spec.distractor_passages; ++i) {
    const bool long_one = rng.uniform() < spec.long_distractor_share;
    const int n = long_one ? 8 + static_cast<int>(rng.below(5)) : 1 + static_cast<int>(rng.below(3));
    std::string t;
    for (int j = 0; j < n; ++j) t += (t.empty() ? "" : " ") + filler(rng);
    add(natural(t), {LabelKind::distractor, {}, {}});
  }

  shuffle(passages.begin(), passages.end(), rng);
  for (std::size_t i = 0; i < passages.size(); ++i) {
    char id[16];
    std::snprintf(id, sizeof id, "p%05zu", i);
    passages[i].id = id;
  }
  bm.passages = std::move(passages);

  // The bucket is a promise about measured frequency; check it.
  for (std::size_t i = 0; i < static_cast<std::size_t>(n_eval); ++i) {
    const int measured = fact_frequency(bm.passages, bm.facts[i]);
    if (measured != frequency[i]) {
      throw Error("generator bug: fact " + bm.facts[i].id + " has frequency " + std::to_string(measured) +
                  ", planned " + std::to_string(frequency[i]));
    }
  }
  return bm;
}

}  // namespace tda::facttrace
