//! Gradient-times-input token attribution and HTML heatmaps.

use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::Path;

use serde::Serialize;

use crate::corpus::{render, DocumentRecord, Layout, Region};
use crate::error::{Error, Result};
use crate::model::RegressionLM;
use crate::targets::TargetStats;
use crate::textcodec::{encode, BOS, EOS};

/// Colors at scores -1, 0 and +1.
pub const NEGATIVE_RGB: (u8, u8, u8) = (230, 25, 75);
pub const NEUTRAL_RGB: (u8, u8, u8) = (255, 255, 255);
pub const POSITIVE_RGB: (u8, u8, u8) = (60, 180, 75);

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TokenScore {
    /// Byte range in the rendered document; empty for BOS and EOS.
    pub span: Range<usize>,
    pub region: Region,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TokenAttribution {
    /// One entry per non-pad token, in sequence order.
    pub tokens: Vec<TokenScore>,
    /// Raw score = stored score * `scale`. 1 until normalized.
    pub scale: f64,
    /// Standardized prediction.
    pub prediction: f64,
    /// Prediction mapped back to a log citation rate.
    pub predicted_log_rate: f64,
}

impl TokenAttribution {
    pub fn scores(&self) -> Vec<f64> {
        self.tokens.iter().map(|t| t.score).collect()
    }
}

/// Per-token `grad . embedding` of the standardized prediction with respect
/// to the token embedding rows. Deterministic: adapters run without dropout.
pub fn attribute(model: &RegressionLM, doc: &DocumentRecord, stats: &TargetStats) -> Result<TokenAttribution> {
    let rendered = render(doc, Layout::default());
    let seq = encode(&rendered.text, model.config.max_seq_len);
    let mask = seq.mask();
    let ids = &seq.ids[..seq.attention_len];
    let e = model.embed(&seq.ids);
    let (prediction, grad) = model.embedding_gradient(&e, &mask)?;

    let mut byte = 0;
    let tokens = ids
        .iter()
        .enumerate()
        .map(|(i, &id)| {
            let (span, region) = if id == BOS || id == EOS {
                (byte..byte, Region::Markers)
            } else {
                let region = rendered.region_at(byte).expect("rendered blocks tile the text");
                byte += 1;
                (byte - 1..byte, region)
            };
            TokenScore { span, region, score: grad.row(i).dot(&e.row(i)) }
        })
        .collect();
    Ok(TokenAttribution {
        tokens,
        scale: 1.0,
        prediction,
        predicted_log_rate: stats.destandardize(prediction),
    })
}

/// Divides by the largest magnitude; an all-zero attribution is unchanged.
pub fn normalize_scores(mut attribution: TokenAttribution) -> TokenAttribution {
    let max = attribution.tokens.iter().fold(0.0f64, |m, t| m.max(t.score.abs()));
    if max > 0.0 {
        for t in &mut attribution.tokens {
            t.score /= max;
        }
        attribution.scale *= max;
    }
    attribution
}

fn lerp(a: u8, b: u8, t: f64) -> u8 {
    (a as f64 + (b as f64 - a as f64) * t).round() as u8
}

/// Red below zero, white at zero, green above; scores are clamped to [-1, 1].
pub fn score_color(score: f64) -> (u8, u8, u8) {
    let s = if score.is_nan() { 0.0 } else { score.clamp(-1.0, 1.0) };
    let (end, t) = if s < 0.0 { (NEGATIVE_RGB, -s) } else { (POSITIVE_RGB, s) };
    (
        lerp(NEUTRAL_RGB.0, end.0, t),
        lerp(NEUTRAL_RGB.1, end.1, t),
        lerp(NEUTRAL_RGB.2, end.2, t),
    )
}

fn escape(s: &str, out: &mut String) {
    for c in s.chars() {
        match c {
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '&' => out.push_str("&amp;"),
            '"' => out.push_str("&quot;"),
            _ => out.push(c),
        }
    }
}

/// Self-contained HTML page, one colored span per character of the
/// attributed text. A multi-byte character takes the score of its
/// strongest byte.
pub fn heatmap_html(doc: &DocumentRecord, attribution: &TokenAttribution) -> String {
    let text = render(doc, Layout::default()).text;
    let mut byte_scores = vec![None; text.len()];
    for t in &attribution.tokens {
        for b in t.span.clone() {
            if b < byte_scores.len() {
                byte_scores[b] = Some(t.score);
            }
        }
    }
    let mut html = String::from(
        "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n<title>Token attribution</title>\n<style>\n\
         body { font-family: sans-serif; margin: 2em; }\n\
         .doc { font-family: monospace; white-space: pre-wrap; line-height: 1.6; }\n\
         .legend { display: flex; align-items: center; gap: 0.5em; margin-bottom: 1.5em; }\n\
         .bar { width: 240px; height: 14px; border: 1px solid #999; \
         background: linear-gradient(to right, rgb(230,25,75), rgb(255,255,255), rgb(60,180,75)); }\n\
         </style>\n</head>\n<body>\n<h1>",
    );
    escape(&doc.id, &mut html);
    html.push_str("</h1>\n");
    let _ = writeln!(
        html,
        "<p>Predicted standardized score {:.4} (log citation rate {:.4}); scale factor {:e}.</p>",
        attribution.prediction, attribution.predicted_log_rate, attribution.scale
    );
    html.push_str(
        "<div class=\"legend\"><span>-1</span><div class=\"bar\"></div><span>+1</span>\
         <span>Scaled gradient value: red tokens decreased the predicted citation rate, \
         green tokens increased it.</span></div>\n<div class=\"doc\">",
    );
    for (start, c) in text.char_indices() {
        let Some(score) = (start..start + c.len_utf8())
            .filter_map(|b| byte_scores[b])
            .max_by(|a, b| a.abs().total_cmp(&b.abs()))
        else {
            // Beyond the model's context window.
            escape(&c.to_string(), &mut html);
            continue;
        };
        let (r, g, b) = score_color(score);
        let _ = write!(html, "<span style=\"background-color: rgb({r},{g},{b})\" title=\"{score:.4}\">");
        escape(&c.to_string(), &mut html);
        html.push_str("</span>");
    }
    html.push_str("</div>\n</body>\n</html>\n");
    html
}

pub fn export_heatmap(doc: &DocumentRecord, attribution: &TokenAttribution, path: &Path) -> Result<()> {
    fs::write(path, heatmap_html(doc, attribution)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegionScore {
    pub region: Region,
    pub mean_abs_score: f64,
    pub n_tokens: usize,
}

/// Mean absolute normalized score per region, in order of first appearance.
/// BOS and EOS are reported under `markers`.
pub fn section_attribution_summary(attribution: &TokenAttribution) -> Vec<RegionScore> {
    let norm = normalize_scores(attribution.clone());
    let mut out: Vec<RegionScore> = Vec::new();
    for t in &norm.tokens {
        match out.iter_mut().find(|r| r.region == t.region) {
            Some(r) => {
                r.mean_abs_score += t.score.abs();
                r.n_tokens += 1;
            }
            None => out.push(RegionScore { region: t.region, mean_abs_score: t.score.abs(), n_tokens: 1 }),
        }
    }
    for r in &mut out {
        r.mean_abs_score /= r.n_tokens as f64;
    }
    out
}

/// Document region with the highest mean |score|, ignoring sequence markers.
pub fn top_region(summary: &[RegionScore]) -> Option<Region> {
    summary
        .iter()
        .filter(|r| r.region != Region::Markers)
        .max_by(|a, b| a.mean_abs_score.total_cmp(&b.mean_abs_score))
        .map(|r| r.region)
}

pub fn summary_csv(summary: &[RegionScore]) -> String {
    let mut s = String::from("region,mean_abs_score\n");
    for r in summary {
        let _ = writeln!(s, "{},{}", r.region, r.mean_abs_score);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synthesize, SignalSpec};
    use crate::model::ModelConfig;
    use crate::textcodec::PAD;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_model(random_head: bool) -> RegressionLM {
        let mut m = RegressionLM::new(ModelConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            max_seq_len: 256,
            init_seed: 4,
            ..ModelConfig::default()
        })
        .unwrap();
        if random_head {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            m.params.head_w.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        }
        m
    }

    fn fixture() -> (DocumentRecord, TargetStats) {
        let spec = SignalSpec::default();
        let c = synthesize(4, &spec, 3).unwrap();
        let stats = TargetStats::fit_documents(&c.docs, spec.delta, spec.cutoff).unwrap();
        (c.docs[0].clone(), stats)
    }

    #[test]
    fn endpoint_colors() {
        assert_eq!(score_color(-1.0), (230, 25, 75));
        assert_eq!(score_color(0.0), (255, 255, 255));
        assert_eq!(score_color(1.0), (60, 180, 75));
        assert_eq!(score_color(5.0), (60, 180, 75));
        assert_eq!(score_color(-0.5), (243, 140, 165));
    }

    #[test]
    fn normalization() {
        let (doc, stats) = fixture();
        let mut a = attribute(&tiny_model(true), &doc, &stats).unwrap();
        a.tokens.truncate(2);
        a.tokens[0].score = 2.0;
        a.tokens[1].score = -4.0;
        let n = normalize_scores(a);
        assert_eq!(n.scores(), [0.5, -1.0]);
        assert_eq!(n.scale, 4.0);
        assert_eq!(normalize_scores(n.clone()), n);
        let mut z = n.clone();
        z.tokens.iter_mut().for_each(|t| t.score = 0.0);
        assert_eq!(normalize_scores(z.clone()), z);
    }

    #[test]
    fn zero_head_gives_zero_scores() {
        let (doc, stats) = fixture();
        let a = attribute(&tiny_model(false), &doc, &stats).unwrap();
        assert!(a.tokens.iter().all(|t| t.score == 0.0));
    }

    #[test]
    fn scores_cover_non_pad_tokens_and_tile_regions() {
        let (doc, stats) = fixture();
        let model = tiny_model(true);
        let a = attribute(&model, &doc, &stats).unwrap();
        let seq = model.encode_document(&doc);
        assert_eq!(a.tokens.len(), seq.ids.iter().filter(|&&t| t != PAD).count());
        assert_eq!(a.tokens.first().unwrap().region, Region::Markers);
        assert_eq!(a.tokens.last().unwrap().region, Region::Markers);
        let summary = section_attribution_summary(&a);
        assert_eq!(summary.iter().map(|r| r.n_tokens).sum::<usize>(), a.tokens.len());
        let regions: Vec<String> = summary.iter().map(|r| r.region.to_string()).collect();
        assert_eq!(regions, ["markers", "title", "abstract", "section_1"]);
    }

    #[test]
    fn uniform_scores_give_equal_regions() {
        let (doc, stats) = fixture();
        let mut a = attribute(&tiny_model(true), &doc, &stats).unwrap();
        a.tokens.iter_mut().for_each(|t| t.score = -0.25);
        let s = section_attribution_summary(&a);
        assert!(s.iter().all(|r| r.mean_abs_score == 1.0));
        assert!(summary_csv(&s).starts_with("region,mean_abs_score\nmarkers,1\ntitle,1\n"));
    }

    #[test]
    fn scores_sum_to_directional_derivative() {
        let (doc, stats) = fixture();
        let model = tiny_model(true);
        let a = attribute(&model, &doc, &stats).unwrap();
        let seq = model.encode_document(&doc);
        let e = model.embed(&seq.ids);
        let eps = 1e-4;
        let y0 = model.forward_from_embeddings(&e, &seq.mask()).unwrap();
        let y1 = model.forward_from_embeddings(&(&e * (1.0 + eps)), &seq.mask()).unwrap();
        let fd = (y1 - y0) / eps;
        let total: f64 = a.scores().iter().sum();
        assert!((total - fd).abs() <= 1e-2 * fd.abs(), "{total} vs {fd}");
        assert_eq!(a.prediction, y0);
    }

    #[test]
    fn attribution_is_deterministic() {
        let (doc, stats) = fixture();
        let mut model = tiny_model(true);
        model.apply_lora(&Default::default(), 0).unwrap();
        assert_eq!(attribute(&model, &doc, &stats).unwrap(), attribute(&model, &doc, &stats).unwrap());
    }

    #[test]
    fn heatmap_file() {
        let (mut doc, stats) = fixture();
        doc.title = "<b>&".into();
        let mut a = normalize_scores(attribute(&tiny_model(true), &doc, &stats).unwrap());
        a.tokens[1].score = -1.0;
        a.tokens[2].score = 1.0;
        a.tokens[3].score = 0.0;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.html");
        export_heatmap(&doc, &a, &path).unwrap();
        let html = std::fs::read_to_string(&path).unwrap();
        assert!(html.contains(">&lt;</span>") && html.contains(">&amp;</span>"));
        assert!(!html.contains("<b>"));
        let doc_part = &html[html.find("<div class=\"doc\">").unwrap()..];
        assert!(doc_part.starts_with(
            "<div class=\"doc\"><span style=\"background-color: rgb(230,25,75)\" title=\"-1.0000\">#</span>\
             <span style=\"background-color: rgb(60,180,75)\" title=\"1.0000\"> </span>\
             <span style=\"background-color: rgb(255,255,255)\" title=\"0.0000\">&lt;</span>"
        ));
        assert!(export_heatmap(&doc, &a, &dir.path().join("missing/h.html")).is_err());
    }
}
