//! Joins selected samples with NLL records and pools them per model.

use std::collections::BTreeMap;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{symbol_costs, AdaptiveContextModel};
use crate::corpus::{join_measurement, SelectedSample, TokenNllRecord};
use crate::error::{Error, Result};
use crate::flops::FlopsEstimate;
use crate::metric::{aggregate, sample_ic, BiasTable, IcResult, SampleIc, SampleMeasurement};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub results: Vec<IcResult>,
    pub samples: Vec<SampleIc>,
}

pub struct EvalRequest<'a> {
    pub dataset_id: &'a str,
    pub samples: &'a [SelectedSample],
    /// Which of each sample's span lists the records were tokenized with.
    pub tokenizer_index: usize,
    pub vocab_size: usize,
    pub flops: FlopsEstimate,
    pub bias_table: &'a BiasTable,
    pub workers: usize,
}

/// Evaluates every model that has records, one [`IcResult`] per model in
/// `model_id` order.
///
/// A record for a sample that was not selected, a duplicate record or a
/// token mismatch is an integrity error. Selected samples without a record
/// are skipped with a warning. Output does not depend on `workers`.
pub fn evaluate(req: &EvalRequest<'_>, records: Vec<TokenNllRecord>) -> Result<EvalOutput> {
    let by_id: BTreeMap<&str, &SelectedSample> = req.samples.iter().map(|s| (s.sample_id.as_str(), s)).collect();
    let mut grouped: BTreeMap<String, BTreeMap<String, TokenNllRecord>> = BTreeMap::new();
    for rec in records {
        rec.validate(Some(req.vocab_size))?;
        let sample = by_id.get(rec.sample_id.as_str()).ok_or_else(|| {
            Error::Integrity(format!("record for model {} names unknown sample {}", rec.model_id, rec.sample_id))
        })?;
        if sample.spans.get(req.tokenizer_index).is_none() {
            return Err(Error::Pipeline(format!("sample {} has no tokenizer {}", rec.sample_id, req.tokenizer_index)));
        }
        let per_model = grouped.entry(rec.model_id.clone()).or_default();
        if per_model.contains_key(&rec.sample_id) {
            return Err(Error::Integrity(format!(
                "duplicate record for model {} sample {}",
                rec.model_id, rec.sample_id
            )));
        }
        per_model.insert(rec.sample_id.clone(), rec);
    }
    if grouped.is_empty() {
        return Err(Error::Empty("no records to evaluate".into()));
    }

    let work: Vec<(&SelectedSample, &TokenNllRecord)> = grouped
        .values()
        .flat_map(|per_model| per_model.values().map(|r| (by_id[r.sample_id.as_str()], r)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(req.workers.max(1))
        .build()
        .map_err(|e| Error::Pipeline(format!("cannot start worker pool: {e}")))?;
    let joined: Vec<Result<SampleMeasurement>> = pool.install(|| {
        work.par_iter()
            .map(|(s, r)| join_measurement(&s.spans[req.tokenizer_index], r, &req.flops))
            .collect()
    });

    let mut measurements = Vec::with_capacity(joined.len());
    for m in joined {
        measurements.push(m?);
    }

    let mut results = Vec::new();
    let mut samples = Vec::new();
    let mut offset = 0;
    for (model_id, per_model) in &grouped {
        let ms = &measurements[offset..offset + per_model.len()];
        offset += per_model.len();
        let missing = req.samples.len() - per_model.len();
        if missing > 0 {
            warn!("model {model_id}: {missing} selected samples have no record and were skipped");
        }
        let result = aggregate(ms, model_id, req.dataset_id, req.bias_table)?;
        for m in ms {
            samples.push(sample_ic(m, model_id, req.dataset_id, result.bias)?);
        }
        results.push(result);
    }
    Ok(EvalOutput { results, samples })
}

/// Scores each sample's first L tokens with a fresh order-`order` adaptive
/// model over the tokenizer's vocabulary.
pub fn reference_records(
    samples: &[SelectedSample],
    tokenizer_index: usize,
    vocab_size: usize,
    order: u32,
    model_id: &str,
    freq_bits: u32,
) -> Result<Vec<TokenNllRecord>> {
    AdaptiveContextModel::new(order, vocab_size, freq_bits)?;
    samples
        .par_iter()
        .map(|s| {
            let spans = s
                .spans
                .get(tokenizer_index)
                .ok_or_else(|| Error::Pipeline(format!("sample {} has no tokenizer {tokenizer_index}", s.sample_id)))?;
            let ids: Vec<u32> = spans.iter().map(|t| t.token_id).collect();
            let mut model = AdaptiveContextModel::new(order, vocab_size, freq_bits)?;
            let costs = symbol_costs(&mut model, &ids)?;
            Ok(TokenNllRecord {
                sample_id: s.sample_id.clone(),
                model_id: model_id.to_string(),
                token_ids: ids,
                nll_bits: costs[1..].to_vec(),
                vocab_size_used: vocab_size as u64,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::TokenSpan;

    fn sample(id: &str, ids: &[u32]) -> SelectedSample {
        SelectedSample {
            sample_id: id.into(),
            byte_len: ids.len(),
            spans: vec![ids.iter().map(|&t| TokenSpan { token_id: t, byte_len: 1 }).collect()],
        }
    }

    fn rec(sample: &str, model: &str, ids: &[u32], nll: f64) -> TokenNllRecord {
        TokenNllRecord {
            sample_id: sample.into(),
            model_id: model.into(),
            token_ids: ids.to_vec(),
            nll_bits: vec![nll; ids.len() - 1],
            vocab_size_used: 256,
        }
    }

    fn request<'a>(samples: &'a [SelectedSample], bias: &'a BiasTable, workers: usize) -> EvalRequest<'a> {
        EvalRequest {
            dataset_id: "toy",
            samples,
            tokenizer_index: 0,
            vocab_size: 256,
            flops: FlopsEstimate::new(1 << 16, 0),
            bias_table: bias,
            workers,
        }
    }

    #[test]
    fn pooled_per_model_results() {
        let samples = vec![sample("a", &[1, 2, 3]), sample("b", &[4, 5, 6])];
        let bias = BiasTable::empty();
        let records = vec![
            rec("b", "m2", &[4, 5, 6], 4.0),
            rec("a", "m1", &[1, 2, 3], 2.0),
            rec("b", "m1", &[4, 5, 6], 6.0),
        ];
        let out = evaluate(&request(&samples, &bias, 2), records).unwrap();
        assert_eq!(out.results.len(), 2);
        let m1 = &out.results[0];
        assert_eq!(m1.model_id, "m1");
        assert_eq!(m1.sample_count, 2);
        assert_eq!(m1.mean_text_bits_per_token, 8.0);
        assert_eq!(m1.mean_nll_bits_per_token, 4.0);
        assert_eq!(m1.ic, (8.0 - 4.0) / 16.0);
        assert_eq!(out.results[1].sample_count, 1);
        assert_eq!(out.samples.len(), 3);
        assert_eq!(out.samples[0].sample_id, "a");
        assert_eq!(out.samples[0].ic, (8.0 - 2.0) / 16.0);
    }

    #[test]
    fn integrity_failures() {
        let samples = vec![sample("a", &[1, 2, 3])];
        let bias = BiasTable::empty();
        let req = request(&samples, &bias, 1);
        let err = evaluate(&req, vec![rec("zz", "m", &[1, 2, 3], 1.0)]).unwrap_err();
        assert!(err.is_integrity());
        let err = evaluate(&req, vec![rec("a", "m", &[1, 9, 3], 1.0)]).unwrap_err();
        assert!(err.is_integrity() && err.to_string().contains("position 1"), "{err}");
        let err = evaluate(&req, vec![rec("a", "m", &[1, 2, 3], 1.0), rec("a", "m", &[1, 2, 3], 1.0)]).unwrap_err();
        assert!(err.is_integrity());
        let mut wide = rec("a", "m", &[1, 2, 3], 1.0);
        wide.vocab_size_used = 512;
        assert!(evaluate(&req, vec![wide]).unwrap_err().is_integrity());
        assert!(matches!(evaluate(&req, vec![]), Err(Error::Empty(_))));
    }

    #[test]
    fn worker_count_does_not_change_output() {
        let samples: Vec<SelectedSample> = (0..40u32).map(|i| sample(&format!("{i:04}"), &[i, i + 1, i + 2, i + 3])).collect();
        let records: Vec<TokenNllRecord> = samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let ids: Vec<u32> = s.spans[0].iter().map(|t| t.token_id).collect();
                let mut r = rec(&s.sample_id, if i % 3 == 0 { "x" } else { "y" }, &ids, 0.0);
                r.nll_bits = (0..3).map(|k| 0.1 * (i * 7 + k) as f64 % 5.0).collect();
                r
            })
            .collect();
        let bias = BiasTable::seeded();
        let one = evaluate(&request(&samples, &bias, 1), records.clone()).unwrap();
        let mut reversed = records.clone();
        reversed.reverse();
        let eight = evaluate(&request(&samples, &bias, 8), reversed).unwrap();
        assert_eq!(serde_json::to_string(&one).unwrap(), serde_json::to_string(&eight).unwrap());
    }

    #[test]
    fn reference_records_are_schema_valid() {
        let samples = vec![sample("a", &[1, 2, 1, 2, 1, 2])];
        let recs = reference_records(&samples, 0, 256, 2, "ref", 30).unwrap();
        assert_eq!(recs.len(), 1);
        recs[0].validate(Some(256)).unwrap();
        assert_eq!(recs[0].nll_bits.len(), 5);
        assert_eq!(recs[0].nll_bits[0], 8.0);
        assert!(reference_records(&samples, 0, 1 << 20, 2, "ref", 30).is_err());
    }
}
