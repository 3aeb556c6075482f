//! Prompt rendering for independent and comparative inference.
//!
//! A prompt is assembled from a [`TaskTemplate`] in a fixed order: task
//! definition, optional demonstration block with gold answers, the
//! enumerated inputs, then the answer prefix that the model continues.
//! Comparative prompts enumerate the target together with unlabeled
//! reference samples; only the target's answer is read back.
//!
//! Templates are plain data. Fragments may contain the placeholders
//! `{n}` (1-based item number), `{text}`, `{label}` and `{count}`
//! (number of enumerated inputs). The built-in TREC template reproduces the
//! published prompt wording byte for byte, including its spacing quirks.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{InferenceMode, LabelSpace, Sample};
use crate::seed;

/// Fragments for the demonstration block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemoLayout {
    pub intro: String,
    /// Uses `{n}` and `{text}`.
    pub item: String,
    pub item_separator: String,
    pub answers_intro: String,
    /// Uses `{n}` and `{label}`.
    pub answer: String,
    pub answer_separator: String,
    pub outro: String,
}

/// Fragments for one inference mode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptLayout {
    #[serde(default)]
    pub lead: String,
    #[serde(default)]
    pub after_definition: String,
    pub demos: DemoLayout,
    /// Uses `{count}`.
    pub inputs_intro: String,
    /// Replaces `inputs_intro` when there are no demonstrations.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zero_shot_inputs_intro: Option<String>,
    /// Uses `{n}` and `{text}`.
    pub input_item: String,
    #[serde(default)]
    pub input_separator: String,
    /// Uses `{count}`; ends where the first label token is generated.
    pub answer_prefix: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskTemplate {
    pub name: String,
    pub task_definition: String,
    pub independent: PromptLayout,
    pub comparative: PromptLayout,
}

const TREC_DEFINITION: &str = "A question can be one of the following six types. ###Types: Abbreviation, Entity, Description and abstract concept, Human being, Location, Numeric value.";

fn s(v: &str) -> String {
    v.to_string()
}

impl TaskTemplate {
    /// TREC question classification, six labels.
    pub fn trec() -> Self {
        TaskTemplate {
            name: s("trec"),
            task_definition: s(TREC_DEFINITION),
            independent: PromptLayout {
                lead: s(" "),
                after_definition: s(" "),
                demos: DemoLayout {
                    intro: s("For instance, for the following example questions"),
                    item: s("###Example Question: {n}: {text}."),
                    item_separator: s(" "),
                    answers_intro: s(" The most suitable types should be:"),
                    answer: s("{n}). {label}."),
                    answer_separator: s(" "),
                    outro: s("  "),
                },
                inputs_intro: s("For the given question, "),
                zero_shot_inputs_intro: Some(s("For the given question, ###Question:  For the given question, ")),
                input_item: s("###Question: {text}"),
                input_separator: s(""),
                answer_prefix: s(" The most suitable type for the given question is: "),
            },
            comparative: PromptLayout {
                lead: s(""),
                after_definition: s(""),
                demos: DemoLayout {
                    intro: s(" For instance, for the following example questions"),
                    item: s("###Example Question {n}: {text}."),
                    item_separator: s(" "),
                    answers_intro: s(" The most suitable types should be:"),
                    answer: s("{n}). {label}."),
                    answer_separator: s(" "),
                    outro: s(" "),
                },
                inputs_intro: s("For the following {count} questions:  "),
                zero_shot_inputs_intro: None,
                input_item: s("###Question {n}:{text}"),
                input_separator: s("\n"),
                answer_prefix: s("\n By comparing them, we know the most suitable types for each of these {count} questions, respectively, are: "),
            },
        }
    }

    /// AG News topic classification, four labels.
    pub fn agnews() -> Self {
        let demos = |intro: &str, outro: &str| DemoLayout {
            intro: s(intro),
            item: s("###Example News Description {n}: {text}."),
            item_separator: s(" "),
            answers_intro: s(" The most suitable types should be:"),
            answer: s("{n}). {label}."),
            answer_separator: s(" "),
            outro: s(outro),
        };
        TaskTemplate {
            name: s("agnews"),
            task_definition: s("A news description topic can be one of the following four types. ###Types: World, Sports, Business, Sci/Tech."),
            independent: PromptLayout {
                lead: s(""),
                after_definition: s(" "),
                demos: demos("For instance, for the following example news descriptions", " "),
                inputs_intro: s("For the given news description, "),
                zero_shot_inputs_intro: None,
                input_item: s("###News Description: {text}."),
                input_separator: s(""),
                answer_prefix: s(" The most suitable type for the given news description is: "),
            },
            comparative: PromptLayout {
                lead: s(""),
                after_definition: s(" "),
                demos: demos("For instance, for the following example news descriptions", " "),
                inputs_intro: s("For the following {count} news descriptions: "),
                zero_shot_inputs_intro: None,
                input_item: s("###News Description {n}: {text}."),
                input_separator: s(" "),
                answer_prefix: s(" By comparing them, we know the most suitable types for each of these {count} news descriptions, respectively, are: "),
            },
        }
    }

    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "trec" => Some(Self::trec()),
            "agnews" => Some(Self::agnews()),
            _ => None,
        }
    }

    pub fn layout(&self, mode: InferenceMode) -> &PromptLayout {
        match mode {
            InferenceMode::Independent => &self.independent,
            InferenceMode::Comparative => &self.comparative,
        }
    }

    /// Check that every fragment only uses known placeholders.
    pub fn validate(&self) -> Result<()> {
        for layout in [&self.independent, &self.comparative] {
            let d = &layout.demos;
            let checks: [(&str, &[&str]); 8] = [
                (&d.item, &["n", "text"]),
                (&d.answer, &["n", "label"]),
                (&layout.inputs_intro, &["count"]),
                (layout.zero_shot_inputs_intro.as_deref().unwrap_or(""), &["count"]),
                (&layout.input_item, &["n", "text"]),
                (&layout.answer_prefix, &["count"]),
                (&d.intro, &[]),
                (&d.answers_intro, &[]),
            ];
            for (fragment, allowed) in checks {
                for name in placeholders(fragment) {
                    if !allowed.contains(&name.as_str()) {
                        return Err(Error::InvalidArgument(format!(
                            "template {}: unknown placeholder {{{name}}} in {fragment:?}",
                            self.name
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

fn placeholders(fragment: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut rest = fragment;
    while let Some(start) = rest.find('{') {
        let after = &rest[start + 1..];
        match after.find('}') {
            Some(end) if after[..end].chars().all(|c| c.is_ascii_lowercase()) && end > 0 => {
                out.push(after[..end].to_string());
                rest = &after[end + 1..];
            }
            _ => rest = after,
        }
    }
    out
}

/// Single-pass placeholder substitution; substituted text is never rescanned.
fn fill(fragment: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(fragment.len());
    let mut rest = fragment;
    while let Some(start) = rest.find('{') {
        out.push_str(&rest[..start]);
        let after = &rest[start + 1..];
        let hit = after.find('}').and_then(|end| {
            vars.iter()
                .find(|(k, _)| *k == &after[..end])
                .map(|(_, v)| (end, *v))
        });
        match hit {
            Some((end, v)) => {
                out.push_str(v);
                rest = &after[end + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub text: String,
    pub mode: InferenceMode,
    pub shots: usize,
    pub target_id: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub reference_ids: Vec<String>,
    pub target_position: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub demo_ids: Vec<String>,
}

/// Render a prompt. An empty `refs` yields an independent prompt.
pub fn build_prompt(
    template: &TaskTemplate,
    space: &LabelSpace,
    target: &Sample,
    demos: &[Sample],
    refs: &[Sample],
    target_position: usize,
) -> Result<PromptSpec> {
    let mode = if refs.is_empty() {
        InferenceMode::Independent
    } else {
        InferenceMode::Comparative
    };
    let count = refs.len() + 1;
    if target_position < 1 || target_position > count {
        return Err(Error::InvalidArgument(format!(
            "target_position {target_position} outside 1..={count}"
        )));
    }
    let layout = template.layout(mode);
    let count_str = count.to_string();

    let mut text = String::new();
    text.push_str(&layout.lead);
    text.push_str(&template.task_definition);
    text.push_str(&layout.after_definition);

    if !demos.is_empty() {
        let d = &layout.demos;
        let mut items = Vec::with_capacity(demos.len());
        let mut answers = Vec::with_capacity(demos.len());
        for (i, demo) in demos.iter().enumerate() {
            let label = demo.label.ok_or_else(|| {
                Error::InvalidArgument(format!("demonstration {} has no label", demo.id))
            })?;
            if label >= space.k() {
                return Err(Error::InvalidArgument(format!(
                    "demonstration {} label {label} outside label space",
                    demo.id
                )));
            }
            let n = (i + 1).to_string();
            items.push(fill(&d.item, &[("n", &n), ("text", &demo.text)]));
            answers.push(fill(&d.answer, &[("n", &n), ("label", space.name(label))]));
        }
        text.push_str(&d.intro);
        text.push_str(&items.join(&d.item_separator));
        text.push_str(&d.answers_intro);
        text.push_str(&answers.join(&d.answer_separator));
        text.push_str(&d.outro);
    }

    let intro = match (&layout.zero_shot_inputs_intro, demos.is_empty()) {
        (Some(z), true) => z,
        _ => &layout.inputs_intro,
    };
    text.push_str(&fill(intro, &[("count", &count_str)]));

    let mut others = refs.iter();
    let mut inputs = Vec::with_capacity(count);
    for pos in 1..=count {
        let sample = if pos == target_position {
            target
        } else {
            others.next().expect("refs cover the remaining positions")
        };
        inputs.push(fill(
            &layout.input_item,
            &[("n", &pos.to_string()), ("text", &sample.text)],
        ));
    }
    text.push_str(&inputs.join(&layout.input_separator));
    text.push_str(&fill(&layout.answer_prefix, &[("count", &count_str)]));

    Ok(PromptSpec {
        text,
        mode,
        shots: demos.len(),
        target_id: target.id.clone(),
        reference_ids: refs.iter().map(|r| r.id.clone()).collect(),
        target_position,
        demo_ids: demos.iter().map(|d| d.id.clone()).collect(),
    })
}

/// Uniform draw without replacement, in drawn order, never returning `exclude`.
pub fn sample_references<R: Rng + ?Sized>(
    pool: &[Sample],
    count: usize,
    exclude: Option<&str>,
    rng: &mut R,
) -> Result<Vec<Sample>> {
    let eligible: Vec<&Sample> = pool
        .iter()
        .filter(|s| Some(s.id.as_str()) != exclude)
        .collect();
    if eligible.len() < count {
        return Err(Error::InsufficientData(format!(
            "reference pool has {} eligible samples, {count} requested",
            eligible.len()
        )));
    }
    Ok(index::sample(rng, eligible.len(), count)
        .into_iter()
        .map(|i| eligible[i].clone())
        .collect())
}

/// Seed used for reference set `j` (1-based) of a schedule.
pub fn reference_set_seed(master_seed: u64, j: usize) -> u64 {
    seed::derive_index(master_seed, "reference-set", j as u64)
}

/// `sets` independent seeded reference draws.
pub fn reference_set_schedule(
    pool: &[Sample],
    count: usize,
    sets: usize,
    exclude: Option<&str>,
    master_seed: u64,
) -> Result<Vec<Vec<Sample>>> {
    (1..=sets)
        .map(|j| {
            let mut rng = seed::rng(reference_set_seed(master_seed, j));
            sample_references(pool, count, exclude, &mut rng)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn sample(id: &str, text: &str, label: Option<usize>) -> Sample {
        Sample { id: id.into(), text: text.into(), label }
    }

    fn trec_space() -> LabelSpace {
        LabelSpace::from_names(&[
            "Abbreviation",
            "Entity",
            "Description and abstract concept",
            "Human being",
            "Location",
            "Numeric value",
        ])
        .unwrap()
    }

    fn pool(n: usize) -> Vec<Sample> {
        (0..n).map(|i| sample(&format!("p{i}"), &format!("text {i}"), None)).collect()
    }

    /// Structural read-back of a rendered prompt.
    fn inspect(layout: &PromptLayout, text: &str, target_text: &str) -> (usize, Option<usize>) {
        let marker = layout.input_item.split("{n}").next().unwrap();
        let mut items = 0;
        let mut target_at = None;
        for n in 1.. {
            let head = fill(&layout.input_item, &[("n", &n.to_string()), ("text", "")]);
            let numbered = marker != layout.input_item && text.contains(&head);
            if !numbered {
                break;
            }
            items = n;
            if text.contains(&fill(&layout.input_item, &[("n", &n.to_string()), ("text", target_text)])) {
                target_at = Some(n);
            }
        }
        (items, target_at)
    }

    #[test]
    fn zero_shot_ends_with_answer_prefix() {
        let p = build_prompt(&TaskTemplate::trec(), &trec_space(), &sample("t", "What is an atom ?", Some(1)), &[], &[], 1).unwrap();
        assert!(p.text.ends_with("The most suitable type for the given question is: "));
        assert_eq!(p.mode, InferenceMode::Independent);
        assert!(p.reference_ids.is_empty());
    }

    #[test]
    fn three_shot_demo_block() {
        let demos = [
            sample("d1", "What is the name of the managing director of Apricot Computer ?", Some(3)),
            sample("d2", "When did Muhammad live ?", Some(5)),
            sample("d3", "How many people lived in Nebraska in the mid 1900s ?", Some(5)),
        ];
        let p = build_prompt(&TaskTemplate::trec(), &trec_space(), &sample("t", "Why does the moon turn orange ?", None), &demos, &[], 1).unwrap();
        assert!(p.text.contains("The most suitable types should be:1). Human being. 2). Numeric value. 3). Numeric value."));
        assert_eq!(p.demo_ids, vec!["d1", "d2", "d3"]);
        assert_eq!(p.shots, 3);
    }

    #[test]
    fn comparative_enumerates_target_first() {
        let refs = [sample("r1", "Where is the Kentucky Horse Park ?", None), sample("r2", "What is the first personal computer company ?", None)];
        let target = sample("t", "How far is it from Denver to Aspen ?", Some(4));
        let t = TaskTemplate::trec();
        let p = build_prompt(&t, &trec_space(), &target, &[], &refs, 1).unwrap();
        assert!(p.text.contains("###Question 1:How far is it from Denver to Aspen ?"));
        assert!(p.text.ends_with("By comparing them, we know the most suitable types for each of these 3 questions, respectively, are: "));
        assert_eq!(inspect(&t.comparative, &p.text, &target.text), (3, Some(1)));
        assert_eq!(p.text.matches(&target.text).count(), 1);

        let p2 = build_prompt(&t, &trec_space(), &target, &[], &refs, 3).unwrap();
        assert_eq!(inspect(&t.comparative, &p2.text, &target.text), (3, Some(3)));
        assert!(p2.text.contains("###Question 1:Where is the Kentucky Horse Park ?"));
    }

    #[test]
    fn argument_errors() {
        let t = TaskTemplate::trec();
        let target = sample("t", "q", None);
        assert!(build_prompt(&t, &trec_space(), &target, &[], &[], 2).is_err());
        assert!(build_prompt(&t, &trec_space(), &target, &[], &pool(2), 0).is_err());
        let unlabeled = [sample("d", "x", None)];
        assert!(matches!(build_prompt(&t, &trec_space(), &target, &unlabeled, &[], 1), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn rendering_is_pure() {
        let t = TaskTemplate::agnews();
        let space = LabelSpace::from_names(&["World", "Sports", "Business", "Sci/Tech"]).unwrap();
        let a = build_prompt(&t, &space, &sample("t", "Stocks rally", None), &[], &pool(2), 1).unwrap();
        let b = build_prompt(&t, &space, &sample("t", "Stocks rally", None), &[], &pool(2), 1).unwrap();
        assert_eq!(a.text, b.text);
        assert!(a.text.contains("###News Description 1: Stocks rally."));
    }

    #[test]
    fn placeholders_in_sample_text_survive() {
        let t = TaskTemplate::trec();
        let p = build_prompt(&t, &trec_space(), &sample("t", "what is {label} and {n} ?", None), &[], &[], 1).unwrap();
        assert!(p.text.contains("###Question: what is {label} and {n} ?"));
    }

    #[test]
    fn builtins_validate_and_round_trip() {
        for t in [TaskTemplate::trec(), TaskTemplate::agnews()] {
            t.validate().unwrap();
            let json = serde_json::to_string(&t).unwrap();
            assert_eq!(serde_json::from_str::<TaskTemplate>(&json).unwrap(), t);
        }
        let mut bad = TaskTemplate::trec();
        bad.comparative.input_item = s("###Q {num}: {text}");
        assert!(bad.validate().is_err());
    }

    #[test]
    fn reference_draws_are_seeded() {
        let p = pool(5);
        let a = sample_references(&p, 2, None, &mut seed::rng(4)).unwrap();
        let b = sample_references(&p, 2, None, &mut seed::rng(4)).unwrap();
        assert_eq!(a, b);
        for s in 0..50 {
            let r = sample_references(&p, 4, Some("p2"), &mut seed::rng(s)).unwrap();
            assert!(r.iter().all(|x| x.id != "p2"));
        }
        assert!(matches!(sample_references(&p, 5, Some("p0"), &mut seed::rng(1)), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn exhausting_the_pool_returns_every_remaining_sample() {
        let p = pool(4);
        let r = sample_references(&p, 3, Some("p1"), &mut seed::rng(8)).unwrap();
        let got: HashSet<&str> = r.iter().map(|x| x.id.as_str()).collect();
        assert_eq!(got, HashSet::from(["p0", "p2", "p3"]));
    }

    #[test]
    fn schedule_examples() {
        let p = pool(6);
        let one = reference_set_schedule(&p, 2, 1, None, 77).unwrap();
        let direct = sample_references(&p, 2, None, &mut seed::rng(reference_set_seed(77, 1))).unwrap();
        assert_eq!(one, vec![direct]);

        let ten = reference_set_schedule(&p, 2, 10, None, 77).unwrap();
        assert_eq!(ten.len(), 10);
        assert!(ten.iter().all(|s| s.len() == 2 && s[0].id != s[1].id));
        assert_eq!(ten, reference_set_schedule(&p, 2, 10, None, 77).unwrap());

        let exact = pool(2);
        let forced = reference_set_schedule(&exact, 2, 5, None, 1).unwrap();
        for set in &forced {
            let ids: HashSet<&str> = set.iter().map(|x| x.id.as_str()).collect();
            assert_eq!(ids, HashSet::from(["p0", "p1"]));
        }
    }
}
