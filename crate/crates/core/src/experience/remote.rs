use serde::{Deserialize, Serialize};

use super::{ExperienceContext, ExperienceModel, ModelStep, Observation};
use crate::chat::{extract_json_block, ChatClient, ChatMessage, EndpointConfig};
use crate::error::{Error, Result};
use crate::rng::Rng;

const SYSTEM_PROMPT: &str = "You are an experience model that simulates the environment of an interactive agent. \
Given the task, the interaction history, similar past transitions and the agent's latest action, reason step by step \
about how the environment reacts, then predict the next state. Use an outcome reward: reward is 1 only on the final \
step of a successfully completed task and 0 otherwise. An invalid action leads to a failure state with reward 0.\n\
Reply with a single ```json fenced object with keys \"reasoning\" (string), \"next_state\" (string), \
\"reward\" (0 or 1), \"done\" (boolean) and optionally \"actions\" (list of admissible next actions).";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RemoteModelConfig {
    pub endpoint: EndpointConfig,
    /// State every episode starts from.
    pub initial_state: String,
    /// Action vocabulary used when a reply does not list admissible actions.
    pub actions: Vec<String>,
    pub max_turns: usize,
    /// Number of most recent turns included in the prompt.
    pub history_window: usize,
}

impl Default for RemoteModelConfig {
    fn default() -> Self {
        Self {
            endpoint: EndpointConfig::default(),
            initial_state: String::new(),
            actions: Vec::new(),
            max_turns: 15,
            history_window: 8,
        }
    }
}

#[derive(Debug, Deserialize)]
struct Reply {
    reasoning: String,
    next_state: String,
    reward: f64,
    done: bool,
    #[serde(default)]
    actions: Option<Vec<String>>,
}

/// Experience model served by a chat-completions endpoint.
pub struct RemoteModel {
    client: ChatClient,
    config: RemoteModelConfig,
}

impl RemoteModel {
    pub fn new(client: ChatClient, config: RemoteModelConfig) -> Self {
        Self { client, config }
    }

    pub fn from_config(config: RemoteModelConfig) -> Result<Self> {
        let endpoint = config.endpoint.clone().with_env();
        let client = ChatClient::from_config(&endpoint)?;
        Ok(Self::new(client, config))
    }

    pub fn build_messages(&self, ctx: &ExperienceContext, state: &str, action: &str) -> Vec<ChatMessage> {
        let mut user = format!("Task: {}\n", ctx.task);
        if !ctx.demos.is_empty() {
            user.push_str("\nSimilar past transitions:\n");
            for (j, d) in ctx.demos.iter().enumerate() {
                user.push_str(&format!(
                    "[{}] State: {}\nAction: {}\nNext state: {}\nReward: {}\n",
                    j + 1,
                    d.state,
                    d.action,
                    d.next_state,
                    d.reward
                ));
            }
        }
        let skip = ctx.history.len().saturating_sub(self.config.history_window);
        if ctx.history.len() > skip {
            user.push_str("\nInteraction history:\n");
            for (i, h) in ctx.history.iter().enumerate().skip(skip) {
                user.push_str(&format!("Step {i}: State: {}\nAction: {}\n", h.state, h.action));
            }
        }
        user.push_str(&format!(
            "\nCurrent step {}:\nState: {state}\nAgent action: {action}\n",
            ctx.history.len()
        ));
        vec![ChatMessage::system(SYSTEM_PROMPT), ChatMessage::user(user)]
    }

    fn parse_reply(&self, content: &str) -> std::result::Result<ModelStep, String> {
        let block = extract_json_block(content).ok_or("reply contains no JSON object")?;
        let reply: Reply = serde_json::from_str(block).map_err(|e| format!("malformed reply: {e}"))?;
        if reply.reward != 0.0 && reply.reward != 1.0 {
            return Err(format!("reward {} is not 0 or 1", reply.reward));
        }
        if reply.reward == 1.0 && !reply.done {
            return Err("reward 1 on a non-terminal step".into());
        }
        if reply.reasoning.trim().is_empty() || reply.next_state.trim().is_empty() {
            return Err("empty reasoning or next_state".into());
        }
        let actions = if reply.done {
            Vec::new()
        } else {
            reply.actions.unwrap_or_else(|| self.config.actions.clone())
        };
        Ok(ModelStep {
            reasoning: reply.reasoning,
            next_state: reply.next_state,
            reward: reply.reward,
            done: reply.done,
            actions,
        })
    }
}

impl ExperienceModel for RemoteModel {
    fn name(&self) -> &str {
        "remote"
    }

    fn reset(&self, _task: &str, _rng: &mut Rng) -> Result<Observation> {
        Ok(Observation {
            state: self.config.initial_state.clone(),
            actions: self.config.actions.clone(),
        })
    }

    fn step(&self, ctx: &ExperienceContext, state: &str, action: &str, _rng: &mut Rng) -> Result<ModelStep> {
        if ctx.turn() >= self.config.max_turns {
            return Err(Error::Horizon {
                max_turns: self.config.max_turns,
            });
        }
        self.client
            .complete_with(self.build_messages(ctx, state, action), |c| self.parse_reply(c))
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::chat::scripted::ScriptedTransport;
    use crate::experience::HistoryItem;
    use crate::rng::rng_from_seed;

    fn model(replies: Vec<&str>, cfg: RemoteModelConfig) -> (RemoteModel, Arc<ScriptedTransport>) {
        let t = Arc::new(ScriptedTransport::new(replies));
        let client = ChatClient::new(Box::new(t.clone()), &cfg.endpoint);
        (RemoteModel::new(client, cfg), t)
    }

    #[test]
    fn parses_fenced_reply_and_retries_malformed() {
        let good = "thinking...\n```json\n{\"reasoning\": \"click opens item\", \"next_state\": \"[item]\", \"reward\": 0, \"done\": false, \"actions\": [\"buy\"]}\n```";
        let (m, t) = model(vec!["not json", "{\"reasoning\":\"r\",\"next_state\":\"s\",\"reward\":1,\"done\":false}", good], RemoteModelConfig::default());
        let ctx = ExperienceContext {
            task: "buy a mug".into(),
            history: vec![HistoryItem { state: "[home]".into(), action: "search[mug]".into() }],
            demos: vec![],
        };
        let step = m.step(&ctx, "[results]", "click[item-1]", &mut rng_from_seed(0)).unwrap();
        assert_eq!(step.next_state, "[item]");
        assert_eq!(step.actions, vec!["buy".to_string()]);
        let reqs = t.requests.lock().unwrap();
        assert_eq!(reqs.len(), 3);
        let user = &reqs[0].messages[1].content;
        assert!(user.contains("Task: buy a mug"));
        assert!(user.contains("Step 0: State: [home]"));
        assert!(user.contains("Agent action: click[item-1]"));
    }

    #[test]
    fn exhausted_retries_surface_raw_payload() {
        let cfg = RemoteModelConfig {
            endpoint: EndpointConfig { max_retries: 0, ..Default::default() },
            ..Default::default()
        };
        let (m, _) = model(vec!["nonsense reply"], cfg);
        let err = m.step(&ExperienceContext::default(), "s", "a", &mut rng_from_seed(0)).unwrap_err();
        assert!(matches!(err, Error::Backend { raw: Some(ref r), .. } if r == "nonsense reply"));
    }

    #[test]
    fn horizon_error() {
        let cfg = RemoteModelConfig { max_turns: 1, ..Default::default() };
        let (m, _) = model(vec![], cfg);
        let ctx = ExperienceContext {
            history: vec![HistoryItem { state: "s".into(), action: "a".into() }],
            ..Default::default()
        };
        assert!(matches!(m.step(&ctx, "s", "a", &mut rng_from_seed(0)), Err(Error::Horizon { max_turns: 1 })));
    }

    #[test]
    fn history_window_truncates_prompt() {
        let cfg = RemoteModelConfig { history_window: 2, ..Default::default() };
        let (m, _) = model(vec![], cfg);
        let ctx = ExperienceContext {
            history: (0..5).map(|i| HistoryItem { state: format!("s{i}"), action: format!("a{i}") }).collect(),
            ..Default::default()
        };
        let msgs = m.build_messages(&ctx, "s5", "a5");
        assert!(!msgs[1].content.contains("Step 2:"));
        assert!(msgs[1].content.contains("Step 3: State: s3"));
        assert!(msgs[1].content.contains("Step 4: State: s4"));
    }
}
