//! The frozen report generator under explanation, its findings labeler and
//! the prompt grammar.
//!
//! Everything outside this module talks to a generator through
//! [`ReportGenerator::generate`] and [`ReportGenerator::label`] only.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::findings::{FindingVector, Vocabulary};
use crate::image::{Image, UnitRect};

pub const PROMPT_PREFIX: &str = "The lung with the abnormalities of ";
pub const NONE_TOKEN: &str = "none";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Report {
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Statistic {
    Mean,
    /// Mean of the brightest `fraction` of the region's pixels.
    TopFractionMean {
        fraction: f64,
    },
}

impl Statistic {
    pub fn evaluate(&self, values: &mut [f64]) -> f64 {
        if values.is_empty() {
            return 0.0;
        }
        match *self {
            Statistic::Mean => values.iter().sum::<f64>() / values.len() as f64,
            Statistic::TopFractionMean { fraction } => {
                let k = ((fraction * values.len() as f64).ceil() as usize).clamp(1, values.len());
                values.sort_by(|a, b| b.total_cmp(a));
                values[..k].iter().sum::<f64>() / k as f64
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRule {
    pub finding: String,
    pub region: UnitRect,
    pub statistic: Statistic,
    /// The finding is reported when the statistic strictly exceeds this.
    pub threshold: f64,
}

impl DecisionRule {
    pub fn statistic_value(&self, image: &Image) -> f64 {
        let mut values = image.region_values(&self.region.to_pixels(image.width()));
        self.statistic.evaluate(&mut values)
    }

    pub fn fires(&self, image: &Image) -> bool {
        self.statistic_value(image) > self.threshold
    }
}

/// The sentence grammar shared by the generator and its labeler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceTemplates {
    pub findings: BTreeMap<String, String>,
    pub normal: String,
}

impl SentenceTemplates {
    pub fn standard() -> Self {
        let findings = [
            ("cardiomegaly", "The cardiac silhouette is enlarged."),
            ("support_device", "A support device is in place."),
            ("lung_opacity", "There is a focal opacity in the right upper lung."),
            ("effusion", "There is a right pleural effusion."),
            ("atelectasis", "There is right basilar atelectasis."),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
        Self { findings, normal: "No acute cardiopulmonary abnormality.".into() }
    }

    fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        let check = |s: &str| {
            if !s.ends_with('.') || s[..s.len() - 1].contains('.') || s.trim() != s || s.len() < 2 {
                Err(Error::invalid(format!("template {s:?} must be one sentence ending in '.'")))
            } else {
                Ok(())
            }
        };
        check(&self.normal)?;
        let mut seen = vec![self.normal.as_str()];
        for name in vocab.names() {
            let t =
                self.findings.get(name).ok_or_else(|| Error::invalid(format!("no sentence template for {name:?}")))?;
            check(t)?;
            if seen.contains(&t.as_str()) {
                return Err(Error::invalid(format!("template {t:?} is ambiguous")));
            }
            seen.push(t);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub generator_id: String,
    pub image_size: usize,
    pub rules: Vec<DecisionRule>,
    pub templates: SentenceTemplates,
}

const HEART_BOX: UnitRect = UnitRect::new(0.46, 0.44, 0.80, 0.82);
const DEVICE_BOX: UnitRect = UnitRect::new(0.41, 0.0, 0.59, 0.43);
const UPPER_LUNG_BOX: UnitRect = UnitRect::new(0.16, 0.16, 0.40, 0.40);
const BAND_BOX: UnitRect = UnitRect::new(0.16, 0.40, 0.35, 0.58);
const BASE_BOX: UnitRect = UnitRect::new(0.16, 0.66, 0.36, 0.76);

fn rule(finding: &str, region: UnitRect, statistic: Statistic, threshold: f64) -> DecisionRule {
    DecisionRule { finding: finding.into(), region, statistic, threshold }
}

impl GeneratorSpec {
    /// Rules on the canonical finding regions with thresholds inside the
    /// separation gap: on noiseless phantoms it reports exactly the ground truth.
    pub fn reference(image_size: usize) -> Self {
        Self {
            generator_id: "reference".into(),
            image_size,
            rules: vec![
                rule("cardiomegaly", HEART_BOX, Statistic::Mean, 0.398),
                rule("support_device", DEVICE_BOX, Statistic::TopFractionMean { fraction: 0.05 }, 0.7),
                rule("lung_opacity", UPPER_LUNG_BOX, Statistic::TopFractionMean { fraction: 0.05 }, 0.355),
                rule("effusion", BASE_BOX, Statistic::Mean, 0.255),
                rule("atelectasis", BAND_BOX, Statistic::TopFractionMean { fraction: 0.1 }, 0.25),
            ],
            templates: SentenceTemplates::standard(),
        }
    }

    /// Shipped generator "a": its opacity detector looks down into the
    /// mid-lung band and is triggered by strong atelectasis.
    pub fn generator_a(image_size: usize) -> Self {
        let mut spec = Self::reference(image_size);
        spec.generator_id = "a".into();
        spec.rules[2] = rule(
            "lung_opacity",
            UnitRect::new(0.16, 0.16, 0.36, 0.50),
            Statistic::TopFractionMean { fraction: 0.05 },
            0.355,
        );
        spec
    }

    /// Shipped generator "b": its atelectasis detector extends down into
    /// the costophrenic region and fires on high effusions.
    pub fn generator_b(image_size: usize) -> Self {
        let mut spec = Self::reference(image_size);
        spec.generator_id = "b".into();
        spec.rules[4] = rule(
            "atelectasis",
            UnitRect::new(0.21, 0.40, 0.35, 0.68),
            Statistic::TopFractionMean { fraction: 0.1 },
            0.25,
        );
        spec
    }

    pub fn shipped(id: &str, image_size: usize) -> Result<Self> {
        match id {
            "a" => Ok(Self::generator_a(image_size)),
            "b" => Ok(Self::generator_b(image_size)),
            "reference" => Ok(Self::reference(image_size)),
            other => Err(Error::invalid(format!("unknown generator {other:?}"))),
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        if self.image_size == 0 {
            return Err(Error::invalid("generator image_size must be positive"));
        }
        for name in vocab.names() {
            let n = self.rules.iter().filter(|r| &r.finding == name).count();
            if n != 1 {
                return Err(Error::invalid(format!("finding {name:?} has {n} decision rules, expected 1")));
            }
        }
        for r in &self.rules {
            vocab.require(&r.finding)?;
            if !r.threshold.is_finite() {
                return Err(Error::invalid(format!("threshold for {:?} is not finite", r.finding)));
            }
            if let Statistic::TopFractionMean { fraction } = r.statistic {
                if !(fraction > 0.0 && fraction <= 1.0) {
                    return Err(Error::invalid(format!("fraction {fraction} outside (0, 1]")));
                }
            }
        }
        self.templates.validate(vocab)
    }
}

/// A validated generator bound to a vocabulary.
#[derive(Debug, Clone)]
pub struct ReportGenerator {
    spec: GeneratorSpec,
    vocab: Vocabulary,
    rule_index: Vec<usize>,
}

impl ReportGenerator {
    pub fn new(spec: GeneratorSpec, vocab: Vocabulary) -> Result<Self> {
        spec.validate(&vocab)?;
        let rule_index =
            vocab.names().iter().map(|n| spec.rules.iter().position(|r| &r.finding == n).expect("validated")).collect();
        Ok(Self { spec, vocab, rule_index })
    }

    pub fn id(&self) -> &str {
        &self.spec.generator_id
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        let n = self.spec.image_size;
        if image.width() != n || image.height() != n {
            return Err(Error::DimensionMismatch {
                expected: format!("{n}x{n}"),
                got: format!("{}x{}", image.width(), image.height()),
            });
        }
        Ok(())
    }

    /// Decision statistic per vocabulary finding.
    pub fn statistics(&self, image: &Image) -> Result<Vec<f64>> {
        self.check_image(image)?;
        Ok(self.rule_index.iter().map(|&r| self.spec.rules[r].statistic_value(image)).collect())
    }

    pub fn threshold(&self, finding: usize) -> f64 {
        self.spec.rules[self.rule_index[finding]].threshold
    }

    /// The generator's internal decision vector.
    pub fn decide(&self, image: &Image) -> Result<FindingVector> {
        let stats = self.statistics(image)?;
        Ok(FindingVector::from_bools(stats.iter().enumerate().map(|(i, &s)| s > self.threshold(i)).collect()))
    }

    pub fn generate(&self, image: &Image) -> Result<Report> {
        let decisions = self.decide(image)?;
        Ok(render_report(&decisions, &self.spec.templates, &self.vocab))
    }

    /// Findings labeler for this generator's report grammar.
    pub fn label(&self, report: &Report) -> Result<FindingVector> {
        extract_findings(report, &self.spec.templates, &self.vocab)
    }

    /// Report then label; the findings the generator "says" for `image`.
    pub fn infer(&self, image: &Image) -> Result<FindingVector> {
        self.label(&self.generate(image)?)
    }
}

pub fn render_report(decisions: &FindingVector, templates: &SentenceTemplates, vocab: &Vocabulary) -> Report {
    let sentences: Vec<&str> = if decisions.any() {
        decisions.active().map(|i| templates.findings[vocab.name(i)].as_str()).collect()
    } else {
        vec![templates.normal.as_str()]
    };
    Report { text: sentences.join(" ") }
}

/// Parses a templated report back into findings. Any sentence outside the
/// grammar is an error.
pub fn extract_findings(report: &Report, templates: &SentenceTemplates, vocab: &Vocabulary) -> Result<FindingVector> {
    let mut v = vocab.empty_vector();
    let mut normal = false;
    let mut sentences = 0;
    for raw in report.text.split_inclusive('.') {
        let sentence = raw.trim();
        if sentence.is_empty() {
            continue;
        }
        sentences += 1;
        if sentence == templates.normal {
            normal = true;
            continue;
        }
        let idx = vocab
            .names()
            .iter()
            .position(|n| templates.findings.get(n).is_some_and(|t| t == sentence))
            .ok_or_else(|| Error::Parse(format!("unrecognized report sentence {sentence:?}")))?;
        if v.get(idx) {
            return Err(Error::Parse(format!("sentence {sentence:?} repeated")));
        }
        v.set(idx, true);
    }
    match (sentences, normal) {
        (0, _) => Err(Error::Parse("empty report".into())),
        (1, true) => Ok(v),
        (_, true) => Err(Error::Parse("normal-study sentence mixed with findings".into())),
        _ => Ok(v),
    }
}

/// `"The lung with the abnormalities of X"` with X the active names in
/// vocabulary order, or `none`.
pub fn reorganize_prompt(findings: &FindingVector, vocab: &Vocabulary) -> String {
    let names = findings.names(vocab);
    if names.is_empty() {
        format!("{PROMPT_PREFIX}{NONE_TOKEN}")
    } else {
        format!("{PROMPT_PREFIX}{}", names.join(", "))
    }
}

pub fn parse_prompt(prompt: &str, vocab: &Vocabulary) -> Result<FindingVector> {
    let rest = prompt
        .strip_prefix(PROMPT_PREFIX)
        .ok_or_else(|| Error::Parse(format!("prompt {prompt:?} lacks the template prefix")))?;
    let mut v = vocab.empty_vector();
    if rest == NONE_TOKEN {
        return Ok(v);
    }
    for name in rest.split(", ") {
        let idx = vocab.index_of(name).ok_or_else(|| Error::Parse(format!("unknown finding {name:?} in prompt")))?;
        if v.get(idx) {
            return Err(Error::Parse(format!("finding {name:?} repeated in prompt")));
        }
        v.set(idx, true);
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::new(["cardiomegaly", "support_device", "lung_opacity", "effusion", "atelectasis"]).unwrap()
    }

    #[test]
    fn prompt_examples() {
        let v = vocab();
        let f = v.vector_of(&["cardiomegaly", "effusion"]).unwrap();
        assert_eq!(reorganize_prompt(&f, &v), "The lung with the abnormalities of cardiomegaly, effusion");
        assert_eq!(reorganize_prompt(&v.empty_vector(), &v), "The lung with the abnormalities of none");
        assert_eq!(parse_prompt("The lung with the abnormalities of none", &v).unwrap(), v.empty_vector());
    }

    #[test]
    fn prompt_errors() {
        let v = vocab();
        for bad in [
            "The lung with the abnormalities of pneumothorax",
            "The lung with abnormalities of effusion",
            "The lung with the abnormalities of effusion, effusion",
            "The lung with the abnormalities of ",
            "The lung with the abnormalities of none, effusion",
        ] {
            assert!(matches!(parse_prompt(bad, &v), Err(Error::Parse(_))), "{bad}");
        }
    }

    #[test]
    fn report_parsing() {
        let v = vocab();
        let t = SentenceTemplates::standard();
        let normal = Report { text: t.normal.clone() };
        assert_eq!(extract_findings(&normal, &t, &v).unwrap(), v.empty_vector());
        let one = Report { text: t.findings["cardiomegaly"].clone() };
        assert_eq!(extract_findings(&one, &t, &v).unwrap(), v.vector_of(&["cardiomegaly"]).unwrap());
        for bad in ["", "The heart is fine.", "No acute cardiopulmonary abnormality. A support device is in place."] {
            assert!(matches!(extract_findings(&Report { text: bad.into() }, &t, &v), Err(Error::Parse(_))), "{bad}");
        }
    }

    #[test]
    fn report_round_trip_over_all_vectors() {
        let v = vocab();
        let t = SentenceTemplates::standard();
        for f in FindingVector::enumerate_all(v.len()) {
            assert_eq!(extract_findings(&render_report(&f, &t, &v), &t, &v).unwrap(), f);
        }
    }

    #[test]
    fn shipped_specs_validate_and_differ() {
        let v = vocab();
        for id in ["a", "b", "reference"] {
            GeneratorSpec::shipped(id, 64).unwrap().validate(&v).unwrap();
        }
        assert_ne!(GeneratorSpec::generator_a(64).rules, GeneratorSpec::generator_b(64).rules);
        assert!(GeneratorSpec::shipped("c", 64).is_err());
    }

    #[test]
    fn spec_validation_catches_gaps() {
        let v = vocab();
        let mut s = GeneratorSpec::reference(64);
        s.rules.pop();
        assert!(s.validate(&v).is_err());
        let mut s = GeneratorSpec::reference(64);
        s.rules[0].threshold = f64::NAN;
        assert!(s.validate(&v).is_err());
        let mut s = GeneratorSpec::reference(64);
        s.templates.findings.remove("effusion");
        assert!(s.validate(&v).is_err());
    }

    #[test]
    fn spec_json_round_trip() {
        let s = GeneratorSpec::generator_b(32);
        let back: GeneratorSpec = serde_json::from_str(&serde_json::to_string_pretty(&s).unwrap()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn generate_rejects_wrong_size() {
        let g = ReportGenerator::new(GeneratorSpec::reference(32), vocab()).unwrap();
        assert!(matches!(g.generate(&Image::new(16, 16)), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn top_fraction_mean() {
        let mut v = vec![0.1, 0.9, 0.5, 0.3];
        assert_eq!(Statistic::TopFractionMean { fraction: 0.5 }.evaluate(&mut v), 0.7);
        assert_eq!(Statistic::Mean.evaluate(&mut [1.0, 3.0]), 2.0);
    }
}
