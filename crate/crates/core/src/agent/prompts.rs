//! Versioned prompt templates with `{name}` placeholders.

use crate::protocol::{GuidanceMode, Phase, Role, RoleKind};
use crate::toolkit::{tools_for, ArgKind};
use serde::Deserialize;
use std::collections::BTreeMap;
use std::sync::OnceLock;

const BUILTIN: &str = include_str!("../../assets/prompts.toml");

#[derive(Debug, Clone, Deserialize)]
pub struct RoleTemplate {
    pub title: String,
    pub description: String,
    pub final_schema: String,
    pub fine_grained: String,
    pub goal_oriented: String,
}

impl RoleTemplate {
    pub fn guidance(&self, mode: GuidanceMode) -> &str {
        match mode {
            GuidanceMode::FineGrained => &self.fine_grained,
            GuidanceMode::GoalOriented => &self.goal_oriented,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct PromptSet {
    pub version: u32,
    pub frame: String,
    pub opening: String,
    pub roles: BTreeMap<String, RoleTemplate>,
}

/// Replaces every `{key}` with its value; unknown braces are left as is.
pub fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(i) = rest.find('{') {
        out.push_str(&rest[..i]);
        let tail = &rest[i..];
        let hit = vars.iter().find(|(k, _)| {
            tail.len() > k.len() + 1 && tail[1..].starts_with(k) && tail[1 + k.len()..].starts_with('}')
        });
        match hit {
            Some((k, v)) => {
                out.push_str(v);
                rest = &tail[k.len() + 2..];
            }
            None => {
                out.push('{');
                rest = &tail[1..];
            }
        }
    }
    out.push_str(rest);
    out
}

fn kind_name(k: ArgKind) -> &'static str {
    match k {
        ArgKind::Str => "string",
        ArgKind::Path => "path",
        ArgKind::Int => "integer",
        ArgKind::Num => "number",
        ArgKind::Bool => "boolean",
        ArgKind::StrList => "list of strings",
        ArgKind::StrMap => "object of string to string",
    }
}

/// One line per tool assigned to `kind`.
pub fn tool_listing(kind: RoleKind) -> String {
    tools_for(kind)
        .iter()
        .map(|t| {
            let args: Vec<String> = t
                .args
                .iter()
                .map(|a| format!("{}: {}{}", a.name, kind_name(a.kind), if a.required { "" } else { " (optional)" }))
                .collect();
            format!("- {}({}): {}", t.name, args.join(", "), t.description)
        })
        .collect::<Vec<_>>()
        .join("\n")
}

impl PromptSet {
    pub fn builtin() -> &'static PromptSet {
        static SET: OnceLock<PromptSet> = OnceLock::new();
        SET.get_or_init(|| PromptSet::parse(BUILTIN).expect("bundled prompts are valid"))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let set: PromptSet = toml::from_str(text).map_err(|e| e.to_string())?;
        for kind in RoleKind::AGENTS {
            if !set.roles.contains_key(kind.as_str()) {
                return Err(format!("no template for role {}", kind.as_str()));
            }
        }
        Ok(set)
    }

    pub fn role(&self, kind: RoleKind) -> &RoleTemplate {
        &self.roles[kind.as_str()]
    }

    pub fn system(&self, role: &Role, mode: GuidanceMode) -> String {
        let t = self.role(role.kind);
        let client_suffix = role.client.as_ref().map(|c| format!(" for client {c}")).unwrap_or_default();
        let client_root = role
            .client
            .as_ref()
            .map(|c| format!("clients/{c}"))
            .unwrap_or_else(|| "none (server role)".into());
        fill(
            &self.frame,
            &[
                ("role_title", &t.title),
                ("role", role.kind.as_str()),
                ("client_suffix", &client_suffix),
                ("role_description", &t.description),
                ("guidance", t.guidance(mode).trim_end()),
                ("client_root", &client_root),
                ("tools", &tool_listing(role.kind)),
                ("final_schema", &t.final_schema),
            ],
        )
    }

    pub fn opening(&self, phase: Phase, briefing: &str) -> String {
        fill(&self.opening, &[("phase", phase.as_str()), ("briefing", briefing)])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fill_replaces_known_keys_only() {
        assert_eq!(fill("a {x} {y} {\"k\": 1}", &[("x", "1")]), "a 1 {y} {\"k\": 1}");
    }

    #[test]
    fn guidance_modes_differ_only_in_guidance_text() {
        let set = PromptSet::builtin();
        for kind in RoleKind::AGENTS {
            let role = if kind.is_client() { Role::client(kind, "c01") } else { Role::server(kind) };
            let t = set.role(kind);
            let fine = set.system(&role, GuidanceMode::FineGrained);
            let goal = set.system(&role, GuidanceMode::GoalOriented);
            assert_ne!(fine, goal);
            let marker = "<<GUIDANCE>>";
            assert_eq!(
                fine.replacen(t.fine_grained.trim_end(), marker, 1),
                goal.replacen(t.goal_oriented.trim_end(), marker, 1),
                "{kind:?}"
            );
            assert!(fine.contains("```action"));
            for tool in tools_for(kind) {
                assert!(fine.contains(&format!("- {}(", tool.name)));
            }
        }
    }
}
