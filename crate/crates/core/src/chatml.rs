//! ChatML rendering of packed dialogue samples, and its inverse.
//!
//! Each turn renders as `<|im_start|>ROLE\nBODY<|im_end|>\n`, where BODY is
//! one vision placeholder per attachment followed by the text content.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::packer::{Pack, Role, Sample, Turn};

pub const IM_START: &str = "<|im_start|>";
pub const IM_END: &str = "<|im_end|>";
pub const VISION_PLACEHOLDER: &str = "<|vision_start|><|placeholder|><|vision_end|>";

const RESERVED: [&str; 5] = [
    IM_START,
    IM_END,
    "<|vision_start|>",
    "<|placeholder|>",
    "<|vision_end|>",
];

fn check_content(content: &str) -> Result<()> {
    if let Some(tok) = RESERVED.iter().find(|t| content.contains(*t)) {
        return Err(Error::InvalidInput(format!(
            "turn content contains reserved token {tok}"
        )));
    }
    Ok(())
}

/// Renders `turns` back to back.
pub fn render_turns(turns: &[Turn]) -> Result<String> {
    let mut out = String::new();
    for turn in turns {
        check_content(&turn.content)?;
        out.push_str(IM_START);
        out.push_str(turn.role.as_str());
        out.push('\n');
        for _ in 0..turn.attachments {
            out.push_str(VISION_PLACEHOLDER);
        }
        out.push_str(&turn.content);
        out.push_str(IM_END);
        out.push('\n');
    }
    Ok(out)
}

/// Renders every sample of `pack`, in pack order.
pub fn serialize_chatml(pack: &Pack, samples: &[Sample]) -> Result<String> {
    let index: HashMap<&str, &Sample> = samples.iter().rev().map(|s| (s.id.as_str(), s)).collect();
    let mut out = String::new();
    for id in &pack.sample_ids {
        let sample = index
            .get(id.as_str())
            .ok_or_else(|| Error::MissingSample(id.clone()))?;
        out.push_str(&render_turns(&sample.turns)?);
    }
    Ok(out)
}

/// Parses text produced by [`render_turns`] into turns.
pub fn parse_chatml(text: &str) -> Result<Vec<Turn>> {
    let err = |offset: usize, reason: &str| Error::ChatmlParse {
        offset,
        reason: reason.to_string(),
    };
    let mut turns = Vec::new();
    let mut pos = 0;
    while pos < text.len() {
        let rest = &text[pos..];
        if !rest.starts_with(IM_START) {
            return Err(err(pos, "expected <|im_start|>"));
        }
        let header = pos + IM_START.len();
        let nl = text[header..]
            .find('\n')
            .ok_or_else(|| err(header, "missing newline after role"))?;
        let role_str = &text[header..header + nl];
        let role = Role::parse(role_str)
            .ok_or_else(|| err(header, &format!("unknown role `{role_str}`")))?;
        let body_start = header + nl + 1;
        let end = text[body_start..]
            .find(IM_END)
            .ok_or_else(|| err(body_start, "unterminated turn"))?;
        let mut body = &text[body_start..body_start + end];
        let mut attachments = 0u32;
        while let Some(stripped) = body.strip_prefix(VISION_PLACEHOLDER) {
            body = stripped;
            attachments += 1;
        }
        if body.contains(IM_START) {
            return Err(err(body_start, "nested <|im_start|>"));
        }
        pos = body_start + end + IM_END.len();
        if !text[pos..].starts_with('\n') {
            return Err(err(pos, "expected newline after <|im_end|>"));
        }
        pos += 1;
        turns.push(Turn {
            role,
            content: body.to_string(),
            attachments,
        });
    }
    Ok(turns)
}

/// Splits the parsed turns of a serialized pack back into per-sample groups
/// using the manifest and each sample's turn count.
pub fn parse_pack(text: &str, pack: &Pack, samples: &[Sample]) -> Result<Vec<(String, Vec<Turn>)>> {
    let index: HashMap<&str, &Sample> = samples.iter().rev().map(|s| (s.id.as_str(), s)).collect();
    let mut turns = parse_chatml(text)?.into_iter();
    let mut out = Vec::with_capacity(pack.sample_ids.len());
    for id in &pack.sample_ids {
        let sample = index
            .get(id.as_str())
            .ok_or_else(|| Error::MissingSample(id.clone()))?;
        let group: Vec<Turn> = turns.by_ref().take(sample.turns.len()).collect();
        if group.len() != sample.turns.len() {
            return Err(Error::ChatmlParse {
                offset: text.len(),
                reason: format!("ran out of turns while reading sample `{id}`"),
            });
        }
        out.push((id.clone(), group));
    }
    if turns.next().is_some() {
        return Err(Error::ChatmlParse {
            offset: text.len(),
            reason: "more turns than the manifest accounts for".into(),
        });
    }
    Ok(out)
}
