// SPDX-License-Identifier: MIT OR Apache-2.0

//! Rationale quality: set overlap, alignment error, and faithfulness on the
//! synthetic languages.
//!
//! The mandatory position `t - 1` is left out of antecedent, distractor and
//! crossover accounting since no method chooses it.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::SaliencyOrdering;
use crate::corpus::{Dataset, Example};
use crate::rationalizer::RationaleRecord;
use crate::{Error, Result};

fn set(xs: &[usize]) -> BTreeSet<usize> {
    xs.iter().copied().collect()
}

/// `|a ∩ b| / |a ∪ b|`, and 1 for two empty sets.
pub fn iou(a: &[usize], b: &[usize]) -> f64 {
    let (a, b) = (set(a), set(b));
    let union = a.union(&b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

/// Harmonic mean of precision and recall of `pred` against `gold`.
pub fn token_f1(pred: &[usize], gold: &[usize]) -> f64 {
    let (p, g) = (set(pred), set(gold));
    let hit = p.intersection(&g).count() as f64;
    if hit == 0.0 {
        return 0.0;
    }
    let precision = hit / p.len() as f64;
    let recall = hit / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

pub type Pair = (usize, usize);

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AlignmentSet {
    sure: BTreeSet<Pair>,
    possible: BTreeSet<Pair>,
}

impl AlignmentSet {
    /// Sure pairs are added to the possible ones if missing.
    pub fn new(sure: impl IntoIterator<Item = Pair>, possible: impl IntoIterator<Item = Pair>) -> Self {
        let sure: BTreeSet<Pair> = sure.into_iter().collect();
        let mut possible: BTreeSet<Pair> = possible.into_iter().collect();
        possible.extend(sure.iter().copied());
        AlignmentSet { sure, possible }
    }

    pub fn sure(&self) -> &BTreeSet<Pair> {
        &self.sure
    }

    pub fn possible(&self) -> &BTreeSet<Pair> {
        &self.possible
    }
}

/// Counts behind an alignment error rate, summable over a corpus.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AerCounts {
    pub hit_sure: usize,
    pub hit_possible: usize,
    pub pred: usize,
    pub sure: usize,
}

impl AerCounts {
    pub fn of(gold: &AlignmentSet, pred: &BTreeSet<Pair>) -> Self {
        AerCounts {
            hit_sure: pred.intersection(&gold.sure).count(),
            hit_possible: pred.intersection(&gold.possible).count(),
            pred: pred.len(),
            sure: gold.sure.len(),
        }
    }

    pub fn add(&mut self, o: AerCounts) {
        self.hit_sure += o.hit_sure;
        self.hit_possible += o.hit_possible;
        self.pred += o.pred;
        self.sure += o.sure;
    }

    pub fn rate(&self) -> f64 {
        let denom = self.pred + self.sure;
        if denom == 0 {
            return 0.0;
        }
        1.0 - (self.hit_sure + self.hit_possible) as f64 / denom as f64
    }
}

/// `1 - (|P ∩ S| + |P ∩ Pos|) / (|P| + |S|)`, and 0 when both are empty.
pub fn aer(gold: &AlignmentSet, pred: &BTreeSet<Pair>) -> f64 {
    AerCounts::of(gold, pred).rate()
}

/// Rationale-to-alignment pairs `(t, k)`.
pub fn rationale_pairs(r: &RationaleRecord) -> BTreeSet<Pair> {
    r.rationale.indices.iter().map(|&k| (r.rationale.t, k)).collect()
}

fn example_of<'a>(ds: &'a Dataset, r: &RationaleRecord) -> Result<&'a Example> {
    let ex = ds
        .examples
        .get(r.example)
        .ok_or_else(|| Error::Metric(format!("rationale refers to example {} of {}", r.example, ds.len())))?;
    if r.rationale.t > ex.len() {
        return Err(Error::Metric(format!(
            "example {}: target {} beyond length {}",
            r.example,
            r.rationale.t,
            ex.len()
        )));
    }
    Ok(ex)
}

fn chosen(r: &RationaleRecord) -> impl Iterator<Item = usize> + '_ {
    let forced = r.rationale.t - 1;
    r.rationale.indices.iter().copied().filter(move |&k| k != forced)
}

/// Antecedent and distractor facts of one rationale at the answer position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Agreement {
    pub has_antecedent: bool,
    pub distractor_free: bool,
}

/// `None` when the rationale targets some position other than the last.
pub fn agreement_of(r: &RationaleRecord, ds: &Dataset) -> Result<Option<Agreement>> {
    let ex = example_of(ds, r)?;
    let ante = ex
        .meta
        .antecedent
        .ok_or_else(|| Error::Metric(format!("example {} has no antecedent annotation", r.example)))?;
    if r.rationale.t != ex.len() {
        return Ok(None);
    }
    let in_distractor = |k: usize| ex.meta.distractor.is_some_and(|(lo, hi)| (lo..=hi).contains(&k));
    Ok(Some(Agreement { has_antecedent: chosen(r).any(|k| k == ante), distractor_free: !chosen(r).any(in_distractor) }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgreementStats {
    /// Rationales at the answer position.
    pub n: usize,
    pub n_insufficient: usize,
    /// Over sufficient rationales.
    pub antecedent_rate: f64,
    /// Over sufficient rationales.
    pub distractor_free_rate: f64,
    /// Over all rationales, insufficient ones judged by their content.
    pub distractor_free_rate_all: f64,
    /// Over sufficient rationales.
    pub mean_length: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        f64::NAN
    } else {
        num as f64 / den as f64
    }
}

pub fn agreement_stats(records: &[RationaleRecord], ds: &Dataset) -> Result<AgreementStats> {
    let (mut n, mut suff, mut ante, mut free, mut free_all, mut len) = (0, 0, 0, 0, 0, 0);
    for r in records {
        let Some(a) = agreement_of(r, ds)? else { continue };
        n += 1;
        free_all += a.distractor_free as usize;
        if r.rationale.sufficient {
            suff += 1;
            ante += a.has_antecedent as usize;
            free += a.distractor_free as usize;
            len += r.rationale.indices.len();
        }
    }
    Ok(AgreementStats {
        n,
        n_insufficient: n - suff,
        antecedent_rate: ratio(ante, suff),
        distractor_free_rate: ratio(free, suff),
        distractor_free_rate_all: ratio(free_all, n),
        mean_length: ratio(len, suff),
    })
}

/// Rationale positions in the first segment, for a target in the second.
/// `None` for first-segment targets.
pub fn crossovers_of(r: &RationaleRecord, ds: &Dataset) -> Result<Option<usize>> {
    let ex = example_of(ds, r)?;
    let boundary =
        ex.meta.boundary.ok_or_else(|| Error::Metric(format!("example {} has no segment boundary", r.example)))?;
    if r.rationale.t <= boundary {
        return Ok(None);
    }
    Ok(Some(chosen(r).filter(|&k| k <= boundary).count()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossoverStats {
    /// Sufficient rationales for second-segment targets.
    pub n: usize,
    pub n_insufficient: usize,
    pub mean_crossovers: f64,
    pub crossover_rate: f64,
}

pub fn crossover_stats(records: &[RationaleRecord], ds: &Dataset) -> Result<CrossoverStats> {
    let (mut n, mut insufficient, mut total, mut any) = (0, 0, 0, 0);
    for r in records {
        let Some(c) = crossovers_of(r, ds)? else { continue };
        if !r.rationale.sufficient {
            insufficient += 1;
            continue;
        }
        n += 1;
        total += c;
        any += (c > 0) as usize;
    }
    Ok(CrossoverStats {
        n,
        n_insufficient: insufficient,
        mean_crossovers: ratio(total, n),
        crossover_rate: ratio(any, n),
    })
}

/// Fraction of orderings whose highest-ranked optional position is gold.
pub fn top1_accuracy(orderings: &[SaliencyOrdering], gold: &[Vec<usize>]) -> Result<f64> {
    if orderings.is_empty() || orderings.len() != gold.len() {
        return Err(Error::Metric(format!("{} orderings for {} gold sets", orderings.len(), gold.len())));
    }
    let hits = orderings.iter().zip(gold).filter(|(o, g)| o.top().is_some_and(|k| g.contains(&k))).count();
    Ok(hits as f64 / orderings.len() as f64)
}

/// A line of a gold file: a rationale set, an alignment, or both.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoldRecord {
    pub example: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sure: Option<Vec<Pair>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub possible: Option<Vec<Pair>>,
}

impl GoldRecord {
    pub fn alignment(&self) -> Option<AlignmentSet> {
        if self.sure.is_none() && self.possible.is_none() {
            return None;
        }
        Some(AlignmentSet::new(self.sure.iter().flatten().copied(), self.possible.iter().flatten().copied()))
    }
}

pub fn read_gold(path: &Path) -> Result<Vec<GoldRecord>> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |msg: String| Error::Parse { path: path.to_path_buf(), line: i + 1, msg };
        let g: GoldRecord = serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
        if g.gold.is_none() && g.sure.is_none() && g.possible.is_none() {
            return Err(parse("gold line has neither `gold` nor `sure`/`possible`".into()));
        }
        if let (Some(t), Some(gold)) = (g.t, &g.gold) {
            if gold.iter().any(|&k| k == 0 || k >= t) {
                return Err(parse(format!("gold indices {gold:?} not below target {t}")));
            }
        }
        out.push(g);
    }
    Ok(out)
}

/// Per-example metric values of one method. Metrics missing for an example
/// are left out of that metric's mean.
pub type ExampleMetrics = BTreeMap<String, f64>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub n: usize,
    pub means: BTreeMap<String, f64>,
    pub counts: BTreeMap<String, usize>,
    /// Values pooled over the corpus rather than averaged, such as AER.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub corpus: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: serde_json::Value,
    pub methods: Vec<MethodSummary>,
}

/// Averages each method's per-example metrics. Every method must cover the
/// same number of examples.
pub fn build_report(per_method: &[(String, Vec<ExampleMetrics>)], config: serde_json::Value) -> Result<EvalReport> {
    if let Some((first, rows)) = per_method.first() {
        if let Some((other, o)) = per_method.iter().find(|(_, o)| o.len() != rows.len()) {
            return Err(Error::Metric(format!(
                "methods `{first}` and `{other}` cover {} and {} examples",
                rows.len(),
                o.len()
            )));
        }
    }
    let methods = per_method
        .iter()
        .map(|(name, rows)| {
            let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
            for row in rows {
                for (k, &v) in row {
                    let e = sums.entry(k.clone()).or_insert((0.0, 0));
                    e.0 += v;
                    e.1 += 1;
                }
            }
            MethodSummary {
                method: name.clone(),
                n: rows.len(),
                means: sums.iter().map(|(k, &(s, c))| (k.clone(), s / c as f64)).collect(),
                counts: sums.iter().map(|(k, &(_, c))| (k.clone(), c)).collect(),
                corpus: BTreeMap::new(),
            }
        })
        .collect();
    Ok(EvalReport { config, methods })
}

/// Per-example metrics of one method's rationales, against the dataset's
/// annotations and optional gold records keyed by `(example, t)`; gold lines
/// without `t` apply to the example's last position.
pub fn example_metrics(
    records: &[RationaleRecord],
    ds: &Dataset,
    gold: Option<&[GoldRecord]>,
    reference: Option<&[RationaleRecord]>,
) -> Result<(Vec<ExampleMetrics>, Option<AerCounts>)> {
    let mut gold_by_key: HashMap<(usize, usize), &GoldRecord> = HashMap::new();
    for g in gold.into_iter().flatten() {
        let len = ds.examples.get(g.example).map(Example::len).unwrap_or(0);
        gold_by_key.insert((g.example, g.t.unwrap_or(len)), g);
    }
    let ref_by_key: HashMap<(usize, usize), &RationaleRecord> =
        reference.into_iter().flatten().map(|r| ((r.example, r.rationale.t), r)).collect();
    let mut aer_counts: Option<AerCounts> = None;
    let mut rows = Vec::with_capacity(records.len());
    for r in records {
        let ex = example_of(ds, r)?;
        let ra = &r.rationale;
        let mut m = ExampleMetrics::new();
        m.insert("sufficient".into(), ra.sufficient as u8 as f64);
        if ra.sufficient {
            m.insert("length".into(), ra.indices.len() as f64);
        }
        if ex.meta.antecedent.is_some() {
            if let Some(a) = agreement_of(r, ds)? {
                m.insert("distractor_free_all".into(), a.distractor_free as u8 as f64);
                if ra.sufficient {
                    m.insert("antecedent".into(), a.has_antecedent as u8 as f64);
                    m.insert("distractor_free".into(), a.distractor_free as u8 as f64);
                }
            }
        }
        if ex.meta.boundary.is_some() && ra.sufficient {
            if let Some(c) = crossovers_of(r, ds)? {
                m.insert("crossovers".into(), c as f64);
                m.insert("has_crossover".into(), (c > 0) as u8 as f64);
            }
        }
        if let Some(g) = gold_by_key.get(&(r.example, ra.t)) {
            if let Some(gs) = &g.gold {
                m.insert("iou".into(), iou(&ra.indices, gs));
                m.insert("token_f1".into(), token_f1(&ra.indices, gs));
            }
            if let Some(al) = g.alignment() {
                let c = AerCounts::of(&al, &rationale_pairs(r));
                m.insert("aer".into(), c.rate());
                aer_counts.get_or_insert_with(AerCounts::default).add(c);
            }
        }
        if let Some(e) = ref_by_key.get(&(r.example, ra.t)) {
            if ra.sufficient && e.rationale.sufficient {
                m.insert("ratio".into(), ra.indices.len() as f64 / e.rationale.indices.len() as f64);
            }
        }
        rows.push(m);
    }
    Ok((rows, aer_counts))
}
