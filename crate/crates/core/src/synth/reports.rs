//! Report templates, composition and the template inverse.

use rand::Rng;

use super::spec::{CaseSpec, Label};

/// Number of report variants per image.
pub const VARIANTS: usize = 5;

/// Description tasks then the conclusion.
pub const NUM_TASKS: usize = 6;

pub const TASK_NAMES: [&str; NUM_TASKS] =
    ["pleomorphism", "crowding", "polarity", "mitosis", "nucleoli", "conclusion"];

/// Paraphrases indexed `[task][level][k]`.
pub const TEMPLATES: [&[&[&str]]; NUM_TASKS] = [
    &[
        &[
            "nuclear pleomorphism is absent .",
            "nuclei are uniform in size .",
            "there is no nuclear pleomorphism .",
        ],
        &[
            "nuclear pleomorphism is mild .",
            "mild nuclear pleomorphism is present .",
            "nuclei show mild variation in size .",
        ],
        &[
            "nuclear pleomorphism is severe .",
            "severe nuclear pleomorphism is present .",
            "nuclei show marked variation in size .",
        ],
    ],
    &[
        &[
            "there is no cell crowding .",
            "cells are not crowded .",
            "cell crowding is absent .",
        ],
        &[
            "cell crowding is moderate .",
            "cells are moderately crowded .",
            "moderate cell crowding is present .",
        ],
        &[
            "cell crowding is severe .",
            "cells are densely crowded .",
            "prominent cell crowding is present .",
        ],
    ],
    &[
        &[
            "polarity is preserved .",
            "cell polarity is maintained .",
            "cells retain their polarity .",
        ],
        &[
            "polarity is lost .",
            "cell polarity is lost .",
            "there is loss of cell polarity .",
        ],
    ],
    &[
        &[
            "no mitosis is seen .",
            "mitotic figures are absent .",
            "there is no mitotic activity .",
        ],
        &[
            "mitosis is present .",
            "mitotic figures are frequent .",
            "there is active mitotic activity .",
        ],
    ],
    &[
        &[
            "nucleoli are inconspicuous .",
            "nucleoli are indistinct .",
            "nucleoli are small .",
        ],
        &[
            "nucleoli are prominent .",
            "prominent nucleoli are present .",
            "nucleoli are enlarged .",
        ],
    ],
    &[
        &[
            "the urothelium is normal .",
            "findings are normal .",
            "this is normal urothelium .",
        ],
        &[
            "consistent with low-grade carcinoma .",
            "findings suggest punlmp or low-grade carcinoma .",
            "this is a low-grade papillary neoplasm .",
        ],
        &[
            "consistent with high-grade carcinoma .",
            "findings suggest high-grade carcinoma .",
            "this is a high-grade papillary neoplasm .",
        ],
        &[
            "insufficient information for diagnosis .",
            "the sample is insufficient .",
            "diagnosis is insufficient due to limited tissue .",
        ],
    ],
];

/// Keywords identifying each level of each task; checked in order, first hit wins.
const KEYWORDS: [&[&[&str]]; NUM_TASKS] = [
    &[&["absent", "uniform", "no"], &["mild"], &["severe", "marked"]],
    &[&["no", "not", "absent"], &["moderate", "moderately"], &["severe", "densely", "prominent"]],
    &[&["preserved", "maintained", "retain"], &["lost", "loss"]],
    &[&["no", "absent"], &["present", "frequent", "active"]],
    &[&["inconspicuous", "indistinct", "small"], &["prominent", "enlarged"]],
    &[&["normal"], &["low-grade", "punlmp"], &["high-grade"], &["insufficient"]],
];

pub fn num_levels(task: usize) -> usize {
    TEMPLATES[task].len()
}

/// One report: one sentence per task, in task order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Report {
    pub sentences: [String; NUM_TASKS],
}

impl Report {
    pub fn to_text(&self) -> String {
        let mut s = self.sentences.join("\n");
        s.push('\n');
        s
    }

    pub fn parse(text: &str) -> Option<Report> {
        let lines: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        let sentences: [String; NUM_TASKS] = lines
            .iter()
            .map(|l| l.to_string())
            .collect::<Vec<_>>()
            .try_into()
            .ok()?;
        Some(Report { sentences })
    }
}

/// Space-separated lowercase tokens.
pub fn tokenize(sentence: &str) -> Vec<String> {
    sentence.split_whitespace().map(str::to_lowercase).collect()
}

/// Level of `task` named by `sentence`, or `None` when no keyword matches.
pub fn parse_level(task: usize, sentence: &str) -> Option<usize> {
    let toks = tokenize(sentence);
    KEYWORDS[task]
        .iter()
        .position(|kws| kws.iter().any(|k| toks.iter().any(|t| t == k)))
}

/// Conclusion class named by a conclusion sentence.
pub fn parse_conclusion(sentence: &str) -> Option<Label> {
    parse_level(NUM_TASKS - 1, sentence).and_then(Label::from_index)
}

/// Five independently paraphrased reports for one case.
pub fn compose_reports<R: Rng + ?Sized>(spec: &CaseSpec, label: Label, rng: &mut R) -> Vec<Report> {
    let levels = spec.levels();
    (0..VARIANTS)
        .map(|_| {
            let sentences = std::array::from_fn(|t| {
                let level = if t < 5 { levels[t] as usize } else { label.index() };
                let options = TEMPLATES[t][level];
                options[rng.gen_range(0..options.len())].to_string()
            });
            Report { sentences }
        })
        .collect()
}

/// Sorted set of every word used by the templates.
pub fn template_words() -> Vec<String> {
    let mut w: Vec<String> = TEMPLATES
        .iter()
        .flat_map(|t| t.iter())
        .flat_map(|l| l.iter())
        .flat_map(|s| tokenize(s))
        .collect();
    w.sort();
    w.dedup();
    w
}
