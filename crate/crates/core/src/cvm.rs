//! Confidence voting between a zero-shot and a one-shot model.
//!
//! Word-prediction scores of the two models live in different spaces, so the
//! vote never compares them across models. When the models disagree, the one
//! that said "normal" is checked against its own score for the reference
//! image: it is trusted only if it finds the query at least as normal as the
//! reference.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalharness::{extract_answer, Answer, AnswerScheme, Response};
use crate::label::Decision;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelOpinion {
    pub decision: Decision,
    /// Score of the "normal" option with the query image.
    pub normal_score_query: f64,
    /// Score of the "normal" option with the reference image fed as the query.
    pub normal_score_reference: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rationale {
    Consensus,
    TrustedQuery,
    AdoptedOpposite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub decision: Decision,
    pub rationale: Rationale,
}

pub fn vote(zero: &ModelOpinion, one: &ModelOpinion) -> Verdict {
    if zero.decision == one.decision {
        return Verdict {
            decision: zero.decision,
            rationale: Rationale::Consensus,
        };
    }
    let normal = match (zero.decision, one.decision) {
        (Decision::Normal, Decision::Defect) => zero,
        (Decision::Defect, Decision::Normal) => one,
        _ => unreachable!("disagreeing binary opinions contain exactly one normal"),
    };
    if normal.normal_score_query >= normal.normal_score_reference {
        Verdict {
            decision: Decision::Normal,
            rationale: Rationale::TrustedQuery,
        }
    } else {
        Verdict {
            decision: Decision::Defect,
            rationale: Rationale::AdoptedOpposite,
        }
    }
}

/// Combined outcome for one sample; `None` when either model abstained.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CombinedItem {
    pub sample_id: String,
    pub verdict: Option<Verdict>,
}

fn opinion(resp: &Response, scheme: AnswerScheme) -> Result<Option<ModelOpinion>> {
    let decision = match extract_answer(&resp.response_text, scheme) {
        Answer::Defect => Decision::Defect,
        Answer::Normal => Decision::Normal,
        Answer::Abstain => return Ok(None),
    };
    match (resp.normal_score_query, resp.normal_score_reference) {
        (Some(q), Some(r)) if q.is_finite() && r.is_finite() => Ok(Some(ModelOpinion {
            decision,
            normal_score_query: q,
            normal_score_reference: r,
        })),
        _ => Err(Error::Integrity(format!(
            "response for `{}` lacks finite normal_score_query/normal_score_reference",
            resp.sample_id
        ))),
    }
}

/// Votes over two response files, matched by `sample_id`, output in id order.
pub fn combine_responses(
    zero: &[Response],
    one: &[Response],
    scheme: AnswerScheme,
) -> Result<Vec<CombinedItem>> {
    let index = |rs: &[Response]| -> Result<BTreeMap<String, Response>> {
        let mut map = BTreeMap::new();
        for r in rs {
            if map.insert(r.sample_id.clone(), r.clone()).is_some() {
                return Err(Error::Integrity(format!("duplicate sample_id `{}`", r.sample_id)));
            }
        }
        Ok(map)
    };
    let zero = index(zero)?;
    let one = index(one)?;
    let only: Vec<&String> = zero
        .keys()
        .filter(|k| !one.contains_key(*k))
        .chain(one.keys().filter(|k| !zero.contains_key(*k)))
        .collect();
    if !only.is_empty() {
        return Err(Error::Integrity(format!(
            "response files cover different samples: {}",
            only.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
        )));
    }
    zero.iter()
        .map(|(id, z)| {
            let o = &one[id];
            let verdict = match (opinion(z, scheme)?, opinion(o, scheme)?) {
                (Some(a), Some(b)) => Some(vote(&a, &b)),
                _ => None,
            };
            Ok(CombinedItem {
                sample_id: id.clone(),
                verdict,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn op(decision: Decision, q: f64, r: f64) -> ModelOpinion {
        ModelOpinion {
            decision,
            normal_score_query: q,
            normal_score_reference: r,
        }
    }

    #[test]
    fn examples() {
        let v = vote(&op(Decision::Defect, 0.1, 0.9), &op(Decision::Defect, 0.9, 0.1));
        assert_eq!(v, Verdict { decision: Decision::Defect, rationale: Rationale::Consensus });
        let v = vote(&op(Decision::Normal, 0.8, 0.6), &op(Decision::Defect, 0.0, 0.0));
        assert_eq!(v, Verdict { decision: Decision::Normal, rationale: Rationale::TrustedQuery });
        let v = vote(&op(Decision::Defect, 0.0, 0.0), &op(Decision::Normal, 0.4, 0.6));
        assert_eq!(v, Verdict { decision: Decision::Defect, rationale: Rationale::AdoptedOpposite });
    }

    #[test]
    fn tie_trusts_query() {
        let v = vote(&op(Decision::Defect, 0.3, 0.9), &op(Decision::Normal, 0.5, 0.5));
        assert_eq!(v.decision, Decision::Normal);
    }

    #[test]
    fn defect_model_scores_are_ignored() {
        // Only the normal-voting model's own scores matter.
        for (dq, dr) in [(0.0, 1.0), (1.0, 0.0), (0.5, 0.5)] {
            let v = vote(&op(Decision::Normal, 0.7, 0.2), &op(Decision::Defect, dq, dr));
            assert_eq!(v.rationale, Rationale::TrustedQuery);
        }
    }

    #[test]
    fn combine_matches_ids_and_flags_abstain() {
        let r = |id: &str, text: &str, q: f64, rf: f64| Response {
            sample_id: id.into(),
            response_text: text.into(),
            normal_score_query: Some(q),
            normal_score_reference: Some(rf),
            rationale: None,
        };
        let zero = vec![r("b", "B", 0.9, 0.5), r("a", "A", 0.1, 0.1), r("c", "???", 0.0, 0.0)];
        let one = vec![r("a", "A", 0.2, 0.2), r("b", "A", 0.1, 0.1), r("c", "B", 0.0, 0.0)];
        let out = combine_responses(&zero, &one, AnswerScheme::OptionLetter).unwrap();
        let ids: Vec<_> = out.iter().map(|c| c.sample_id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        assert_eq!(out[0].verdict.unwrap().rationale, Rationale::Consensus);
        assert_eq!(out[1].verdict.unwrap().rationale, Rationale::TrustedQuery);
        assert_eq!(out[2].verdict, None);

        let missing = combine_responses(&zero[..1], &one, AnswerScheme::OptionLetter);
        assert!(missing.is_err());
    }
}
