//! A miniature deterministic shopping site.
//!
//! Flow: home → search results (paged) → item page (optionally reviews) →
//! cart → checkout. States are rendered as structured text whose first line
//! is a machine-readable header, so the model can be driven purely through
//! strings like an LLM-backed one.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{ExperienceContext, ExperienceModel, ModelStep, Observation};
use crate::error::{Error, Result};
use crate::policy::{Decision, FeatureMap, SparseFeatures};
use crate::rng::{derive_seed, Rng};

pub const SHOP_CATEGORIES: [&str; 5] = ["mug", "shoes", "shirt", "lamp", "backpack"];
pub const SHOP_COLORS: [&str; 5] = ["red", "blue", "green", "black", "white"];
const VARIANTS: [&str; 2] = ["basic", "deluxe"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShopConfig {
    /// Results shown per page.
    pub page_size: usize,
    /// Seeds the order in which items of a category are listed.
    pub listing_seed: u64,
}

impl Default for ShopConfig {
    fn default() -> Self {
        Self {
            page_size: 4,
            listing_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Item {
    pub id: usize,
    pub category: usize,
    pub color: usize,
    pub variant: usize,
    pub price: u32,
}

impl Item {
    pub fn line(&self) -> String {
        format!(
            "item-{}: {} {} ({}) ${}",
            self.id, SHOP_COLORS[self.color], SHOP_CATEGORIES[self.category], VARIANTS[self.variant], self.price
        )
    }
}

/// Fixed product catalog plus the per-category listing order.
#[derive(Debug, Clone)]
pub struct Catalog {
    items: Vec<Item>,
    listings: Vec<Vec<usize>>,
    page_size: usize,
}

impl Catalog {
    pub fn new(config: &ShopConfig) -> Result<Self> {
        if config.page_size == 0 {
            return Err(Error::Config("shop.page_size must be >= 1".into()));
        }
        let mut items = Vec::new();
        for category in 0..SHOP_CATEGORIES.len() {
            for color in 0..SHOP_COLORS.len() {
                let basic = 10 + 5 * ((3 * category + 2 * color) % 5) as u32;
                let deluxe = basic + 15 + 5 * ((category + color) % 3) as u32;
                for (variant, price) in [basic, deluxe].into_iter().enumerate() {
                    items.push(Item {
                        id: items.len(),
                        category,
                        color,
                        variant,
                        price,
                    });
                }
            }
        }
        let listings = (0..SHOP_CATEGORIES.len())
            .map(|c| {
                let mut ids: Vec<usize> = items.iter().filter(|i| i.category == c).map(|i| i.id).collect();
                ids.sort_by_key(|&id| derive_seed(config.listing_seed, &[id as u64]));
                ids
            })
            .collect();
        Ok(Self {
            items,
            listings,
            page_size: config.page_size,
        })
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn item(&self, id: usize) -> Option<&Item> {
        self.items.get(id)
    }

    pub fn n_pages(&self, category: usize) -> usize {
        self.listings[category].len().div_ceil(self.page_size)
    }

    /// Item ids on `page` (1-based) of `category`'s listing.
    pub fn page(&self, category: usize, page: usize) -> &[usize] {
        let list = &self.listings[category];
        let start = ((page - 1) * self.page_size).min(list.len());
        let end = (start + self.page_size).min(list.len());
        &list[start..end]
    }

    /// Page (1-based) on which item `id` is listed.
    pub fn page_of(&self, id: usize) -> usize {
        let item = &self.items[id];
        let pos = self.listings[item.category]
            .iter()
            .position(|&x| x == id)
            .expect("every item is listed");
        pos / self.page_size + 1
    }

    pub fn matching_items<'a>(&'a self, task: &'a TaskSpec) -> impl Iterator<Item = &'a Item> + 'a {
        self.items.iter().filter(move |i| task.accepts_item(i))
    }

    /// A task is feasible if some item satisfies its constraints.
    pub fn is_feasible(&self, task: &TaskSpec) -> bool {
        self.matching_items(task).next().is_some()
    }
}

/// Parsed purchase instruction:
/// `buy (a|an|any) <color> <category>[ under $<N>][ after reading reviews]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TaskSpec {
    pub color: usize,
    pub category: usize,
    /// Inclusive price cap.
    pub max_price: Option<u32>,
    pub require_reviews: bool,
}

impl TaskSpec {
    pub fn accepts_item(&self, item: &Item) -> bool {
        item.color == self.color
            && item.category == self.category
            && self.max_price.is_none_or(|cap| item.price <= cap)
    }

    pub fn satisfied_by(&self, item: &Item, reviewed: bool) -> bool {
        self.accepts_item(item) && (reviewed || !self.require_reviews)
    }
}

pub fn parse_task(instruction: &str) -> Option<TaskSpec> {
    let words: Vec<String> = instruction.split_whitespace().map(|w| w.to_lowercase()).collect();
    let mut it = words.iter().map(String::as_str).peekable();
    if it.next()? != "buy" {
        return None;
    }
    if !matches!(it.next()?, "a" | "an" | "any") {
        return None;
    }
    let color_word = it.next()?;
    let color = SHOP_COLORS.iter().position(|c| *c == color_word)?;
    let category_word = it.next()?;
    let category = SHOP_CATEGORIES.iter().position(|c| *c == category_word)?;
    let mut max_price = None;
    if it.peek() == Some(&"under") {
        it.next();
        let p = it.next()?.strip_prefix('$')?.parse::<u32>().ok()?;
        max_price = Some(p);
    }
    let mut require_reviews = false;
    if it.peek() == Some(&"after") {
        it.next();
        if it.next()? != "reading" || it.next()? != "reviews" {
            return None;
        }
        require_reviews = true;
    }
    if it.next().is_some() {
        return None;
    }
    Some(TaskSpec {
        color,
        category,
        max_price,
        require_reviews,
    })
}

pub fn render_task(task: &TaskSpec) -> String {
    let mut s = format!("buy a {} {}", SHOP_COLORS[task.color], SHOP_CATEGORIES[task.category]);
    if let Some(cap) = task.max_price {
        s.push_str(&format!(" under ${cap}"));
    }
    if task.require_reviews {
        s.push_str(" after reading reviews");
    }
    s
}

/// Site state. Pages are 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShopState {
    Home,
    Results { category: usize, page: usize },
    Item { id: usize, page: usize, reviewed: bool },
    Reviews { id: usize, page: usize },
    Cart { id: usize, page: usize, reviewed: bool },
    Confirmation { id: usize, success: bool },
}

fn yes_no(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

impl ShopState {
    fn header(&self, catalog: &Catalog) -> String {
        match *self {
            ShopState::Home => "[home]".into(),
            ShopState::Results { category, page } => format!(
                "[results category={} page={}/{}]",
                SHOP_CATEGORIES[category],
                page,
                catalog.n_pages(category)
            ),
            ShopState::Item { id, page, reviewed } => {
                format!("[item id={id} page={page} reviewed={}]", yes_no(reviewed))
            }
            ShopState::Reviews { id, page } => format!("[reviews id={id} page={page}]"),
            ShopState::Cart { id, page, reviewed } => {
                format!("[cart id={id} page={page} reviewed={}]", yes_no(reviewed))
            }
            ShopState::Confirmation { id, success } => {
                format!("[confirmation id={id} status={}]", if success { "success" } else { "failure" })
            }
        }
    }

    pub fn render(&self, catalog: &Catalog) -> String {
        let mut lines = vec![self.header(catalog)];
        match *self {
            ShopState::Home => lines.push("Welcome to the shop. Use the search bar to find products.".into()),
            ShopState::Results { category, page } => {
                let ids = catalog.page(category, page);
                lines.push(format!(
                    "Showing {} of {} results for \"{}\".",
                    ids.len(),
                    catalog.listings[category].len(),
                    SHOP_CATEGORIES[category]
                ));
                lines.extend(ids.iter().map(|&id| format!("- {}", catalog.items[id].line())));
            }
            ShopState::Item { id, reviewed, .. } => {
                lines.push(format!("Product: {}", catalog.items[id].line()));
                lines.push(format!("Reviews: {}", if reviewed { "read" } else { "not read" }));
            }
            ShopState::Reviews { id, .. } => {
                let item = &catalog.items[id];
                lines.push(format!(
                    "Customer reviews for item-{id}: {}.{} stars; buyers mention the {} finish.",
                    3 + item.price % 2,
                    item.price % 10,
                    SHOP_COLORS[item.color]
                ));
            }
            ShopState::Cart { id, reviewed, .. } => {
                lines.push(format!("Cart: {}", catalog.items[id].line()));
                lines.push(format!("Reviews: {}", if reviewed { "read" } else { "not read" }));
            }
            ShopState::Confirmation { id, success } => {
                lines.push(format!("Order placed for {}.", catalog.items[id].line()));
                lines.push(if success {
                    "The order matches the request.".into()
                } else {
                    "The order does not match the request.".into()
                });
            }
        }
        lines.join("\n")
    }

    /// Parses the header line of a rendered state.
    pub fn parse(text: &str) -> Option<ShopState> {
        let header = text.lines().next()?.trim();
        let inner = header.strip_prefix('[')?.strip_suffix(']')?;
        let mut parts = inner.split_whitespace();
        let kind = parts.next()?;
        let mut fields = std::collections::HashMap::new();
        for p in parts {
            let (k, v) = p.split_once('=')?;
            fields.insert(k, v);
        }
        let num = |k: &str| fields.get(k).and_then(|v| v.parse::<usize>().ok());
        let flag = |k: &str| match fields.get(k).copied() {
            Some("yes") => Some(true),
            Some("no") => Some(false),
            _ => None,
        };
        Some(match kind {
            "home" => ShopState::Home,
            "results" => {
                let category = SHOP_CATEGORIES.iter().position(|c| Some(c) == fields.get("category"))?;
                let page = fields.get("page")?.split('/').next()?.parse().ok()?;
                ShopState::Results { category, page }
            }
            "item" => ShopState::Item {
                id: num("id")?,
                page: num("page")?,
                reviewed: flag("reviewed")?,
            },
            "reviews" => ShopState::Reviews {
                id: num("id")?,
                page: num("page")?,
            },
            "cart" => ShopState::Cart {
                id: num("id")?,
                page: num("page")?,
                reviewed: flag("reviewed")?,
            },
            "confirmation" => ShopState::Confirmation {
                id: num("id")?,
                success: match *fields.get("status")? {
                    "success" => true,
                    "failure" => false,
                    _ => return None,
                },
            },
            _ => return None,
        })
    }

    fn is_valid(&self, catalog: &Catalog) -> bool {
        let id_ok = |id: usize| id < catalog.items.len();
        let page_ok = |id: usize, page: usize| id_ok(id) && catalog.page_of(id) == page;
        match *self {
            ShopState::Home => true,
            ShopState::Results { category, page } => page >= 1 && page <= catalog.n_pages(category),
            ShopState::Item { id, page, .. } | ShopState::Reviews { id, page } | ShopState::Cart { id, page, .. } => {
                page_ok(id, page)
            }
            ShopState::Confirmation { id, .. } => id_ok(id),
        }
    }
}

/// Admissible actions in `state`, in a fixed order.
pub fn shop_actions(catalog: &Catalog, state: &ShopState) -> Vec<String> {
    match *state {
        ShopState::Home => SHOP_CATEGORIES.iter().map(|c| format!("search[{c}]")).collect(),
        ShopState::Results { category, page } => {
            let mut acts: Vec<String> = catalog
                .page(category, page)
                .iter()
                .map(|&id| format!("click[{}]", catalog.items[id].line()))
                .collect();
            if page < catalog.n_pages(category) {
                acts.push("next page".into());
            }
            if page > 1 {
                acts.push("prev page".into());
            }
            acts.push("back to search".into());
            acts
        }
        ShopState::Item { reviewed, .. } => {
            let mut acts = vec!["add to cart".to_string()];
            if !reviewed {
                acts.push("read reviews".into());
            }
            acts.push("back to results".into());
            acts
        }
        ShopState::Reviews { .. } => vec!["back to item".into()],
        ShopState::Cart { .. } => vec!["checkout".into(), "back to results".into()],
        ShopState::Confirmation { .. } => Vec::new(),
    }
}

/// Scripted experience model over [`Catalog`]. Deterministic: the RNG is
/// never consulted.
#[derive(Debug, Clone)]
pub struct ShopModel {
    catalog: Catalog,
}

struct Transition {
    next: ShopState,
    reward: f64,
    done: bool,
    reasoning: String,
}

impl ShopModel {
    pub fn new(config: &ShopConfig) -> Result<Self> {
        Ok(Self {
            catalog: Catalog::new(config)?,
        })
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    pub fn observe(&self, state: &ShopState) -> Observation {
        Observation {
            state: state.render(&self.catalog),
            actions: shop_actions(&self.catalog, state),
        }
    }

    fn target_note(&self, task: &TaskSpec, category: usize, page: usize) -> String {
        let on_page = self
            .catalog
            .page(category, page)
            .iter()
            .filter(|&&id| task.accepts_item(&self.catalog.items[id]))
            .count();
        if on_page > 0 {
            format!("this page lists {on_page} product(s) that fit the request")
        } else {
            "no product on this page fits the request".to_string()
        }
    }

    fn transition(&self, task: &TaskSpec, state: ShopState, action: &str) -> Option<Transition> {
        let cat = &self.catalog;
        let plain = |next: ShopState, reasoning: String| Transition {
            next,
            reward: 0.0,
            done: false,
            reasoning,
        };
        let t = match state {
            ShopState::Home => {
                let q = action.strip_prefix("search[")?.strip_suffix(']')?;
                let category = SHOP_CATEGORIES.iter().position(|c| *c == q)?;
                let relevant = if category == task.category {
                    "matches the requested product type"
                } else {
                    "does not match the requested product type"
                };
                plain(
                    ShopState::Results { category, page: 1 },
                    format!(
                        "rule=search: the query \"{q}\" {relevant}; the site lists {} results over {} page(s) and shows page 1, where {}.",
                        cat.listings[category].len(),
                        cat.n_pages(category),
                        self.target_note(task, category, 1)
                    ),
                )
            }
            ShopState::Results { category, page } => match action {
                "next page" if page < cat.n_pages(category) => plain(
                    ShopState::Results { category, page: page + 1 },
                    format!("rule=paginate: moving to page {}; {}.", page + 1, self.target_note(task, category, page + 1)),
                ),
                "prev page" if page > 1 => plain(
                    ShopState::Results { category, page: page - 1 },
                    format!("rule=paginate: moving back to page {}; {}.", page - 1, self.target_note(task, category, page - 1)),
                ),
                "back to search" => plain(ShopState::Home, "rule=navigate: returning to the search page.".into()),
                _ => {
                    let line = action.strip_prefix("click[")?.strip_suffix(']')?;
                    let id = *cat.page(category, page).iter().find(|&&id| cat.items[id].line() == line)?;
                    let fit = if task.accepts_item(&cat.items[id]) { "fits" } else { "does not fit" };
                    plain(
                        ShopState::Item { id, page, reviewed: false },
                        format!("rule=open-item: the agent opens item-{id}, which {fit} the request; the product page shows its details."),
                    )
                }
            },
            ShopState::Item { id, page, reviewed } => match action {
                "add to cart" => plain(
                    ShopState::Cart { id, page, reviewed },
                    format!("rule=add-to-cart: item-{id} is placed in the cart; checkout becomes available."),
                ),
                "read reviews" if !reviewed => plain(
                    ShopState::Reviews { id, page },
                    format!("rule=reviews: the review section of item-{id} is displayed."),
                ),
                "back to results" => plain(
                    ShopState::Results { category: cat.items[id].category, page },
                    format!("rule=navigate: returning to results page {page}."),
                ),
                _ => return None,
            },
            ShopState::Reviews { id, page } => match action {
                "back to item" => plain(
                    ShopState::Item { id, page, reviewed: true },
                    format!("rule=navigate: back on item-{id}, now with its reviews read."),
                ),
                _ => return None,
            },
            ShopState::Cart { id, page, reviewed } => match action {
                "checkout" => {
                    let item = &cat.items[id];
                    let success = task.satisfied_by(item, reviewed);
                    let why = if success {
                        "the purchased item satisfies every constraint of the task, so the episode ends in success".to_string()
                    } else if !task.accepts_item(item) {
                        format!("item-{id} does not satisfy the requested color, product or price, so the purchase fails")
                    } else {
                        "the task required reading reviews before buying, so the purchase fails".to_string()
                    };
                    Transition {
                        next: ShopState::Confirmation { id, success },
                        reward: if success { 1.0 } else { 0.0 },
                        done: true,
                        reasoning: format!("rule=checkout: {why}."),
                    }
                }
                "back to results" => plain(
                    ShopState::Results { category: cat.items[id].category, page },
                    format!("rule=navigate: leaving the cart for results page {page}."),
                ),
                _ => return None,
            },
            ShopState::Confirmation { .. } => return None,
        };
        Some(t)
    }
}

impl ExperienceModel for ShopModel {
    fn name(&self) -> &str {
        "shop"
    }

    fn reset(&self, task: &str, _rng: &mut Rng) -> Result<Observation> {
        let spec = parse_task(task).ok_or_else(|| Error::InvalidArgument(format!("unparseable shop task: {task:?}")))?;
        if !self.catalog.is_feasible(&spec) {
            return Err(Error::InvalidArgument(format!("infeasible shop task: {task:?}")));
        }
        Ok(self.observe(&ShopState::Home))
    }

    fn step(&self, ctx: &ExperienceContext, state: &str, action: &str, _rng: &mut Rng) -> Result<ModelStep> {
        let task = parse_task(&ctx.task)
            .ok_or_else(|| Error::InvalidArgument(format!("unparseable shop task: {:?}", ctx.task)))?;
        let parsed = ShopState::parse(state).filter(|s| s.is_valid(&self.catalog));
        let Some(current) = parsed else {
            return Ok(ModelStep::failure("rule=invalid: the current state is not a page of this site."));
        };
        match self.transition(&task, current, action) {
            Some(t) => {
                let obs = self.observe(&t.next);
                Ok(ModelStep {
                    reasoning: t.reasoning,
                    next_state: obs.state,
                    reward: t.reward,
                    done: t.done,
                    actions: if t.done { Vec::new() } else { obs.actions },
                })
            }
            None => Ok(ModelStep::failure(format!(
                "rule=invalid: \"{action}\" is not an admissible action on this page, so the episode fails with zero reward."
            ))),
        }
    }
}

/// Action of the hand-written optimal policy, or `None` in terminal states.
pub fn oracle_action(catalog: &Catalog, task: &TaskSpec, state: &ShopState) -> Option<String> {
    Some(match *state {
        ShopState::Home => format!("search[{}]", SHOP_CATEGORIES[task.category]),
        ShopState::Results { category, page } => {
            if category != task.category {
                return Some("back to search".into());
            }
            let best_here = catalog
                .page(category, page)
                .iter()
                .map(|&id| &catalog.items[id])
                .filter(|i| task.accepts_item(i))
                .min_by_key(|i| (i.price, i.id));
            if let Some(item) = best_here {
                format!("click[{}]", item.line())
            } else {
                let target_page = catalog.matching_items(task).map(|i| catalog.page_of(i.id)).min()?;
                if target_page > page {
                    "next page".into()
                } else {
                    "prev page".into()
                }
            }
        }
        ShopState::Item { id, reviewed, .. } => {
            if !task.accepts_item(&catalog.items[id]) {
                "back to results".into()
            } else if task.require_reviews && !reviewed {
                "read reviews".into()
            } else {
                "add to cart".into()
            }
        }
        ShopState::Reviews { .. } => "back to item".into(),
        ShopState::Cart { id, reviewed, .. } => {
            if task.satisfied_by(&catalog.items[id], reviewed) {
                "checkout".into()
            } else {
                "back to results".into()
            }
        }
        ShopState::Confirmation { .. } => return None,
    })
}

// ---------------------------------------------------------------------------
// Agent features
// ---------------------------------------------------------------------------

const VERBS: [&str; 9] = ["search", "click", "next", "prev", "back", "add", "read", "checkout", "other"];
const SIGNALS: usize = 6;
const STOP_WORDS: [&str; 9] = ["buy", "a", "an", "any", "under", "after", "reading", "reviews", "read"];

/// Relational features for the shop agent, computed from text only: token
/// overlap between the task and each action (or the current page), a price
/// comparison, and whether a reviews requirement is still pending. They carry
/// no item- or color-specific weights, so what is learned on one task
/// transfers to its variations.
#[derive(Debug, Clone, Copy, Default)]
pub struct ShopFeatures;

struct TaskWords {
    content: BTreeSet<String>,
    cap: Option<u32>,
    needs_reviews: bool,
}

fn words(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '-'))
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect()
}

fn price_in(text: &str) -> Option<u32> {
    let (_, rest) = text.split_once('$')?;
    let digits: String = rest.chars().take_while(|c| c.is_ascii_digit()).collect();
    digits.parse().ok()
}

impl TaskWords {
    fn new(task: &str) -> Self {
        let all = words(task);
        Self {
            content: all
                .iter()
                .filter(|w| !STOP_WORDS.contains(&w.as_str()) && w.parse::<u32>().is_err())
                .cloned()
                .collect(),
            cap: price_in(task),
            needs_reviews: all.contains("reviews"),
        }
    }

    fn overlap(&self, text: &str) -> (usize, bool) {
        let w = words(text);
        let hits = self.content.iter().filter(|c| w.contains(*c)).count();
        let price_ok = match (self.cap, price_in(text)) {
            (Some(cap), Some(p)) => p <= cap,
            _ => true,
        };
        (hits, price_ok)
    }

    fn full_match(&self, text: &str) -> bool {
        let (hits, price_ok) = self.overlap(text);
        hits == self.content.len() && price_ok
    }
}

impl FeatureMap for ShopFeatures {
    fn dim(&self) -> usize {
        VERBS.len() * SIGNALS
    }

    fn decision(&self, task: &str, state: &str, actions: &[String]) -> Decision {
        let tw = TaskWords::new(task);
        let body: Vec<&str> = state.lines().skip(1).collect();
        let state_full = body.iter().any(|l| tw.full_match(l));
        let state_price_bad = body.iter().any(|l| !tw.overlap(l).1);
        let reviews_pending = tw.needs_reviews && body.iter().any(|l| l.trim() == "Reviews: not read");
        let action_features = actions
            .iter()
            .map(|action| {
                let verb_name = action.split(|c: char| c == '[' || c.is_whitespace()).next().unwrap_or("");
                let verb = VERBS.iter().position(|v| *v == verb_name).unwrap_or(VERBS.len() - 1);
                let (hits, price_ok) = tw.overlap(action);
                let full = hits == tw.content.len() && price_ok && hits > 0;
                let signals = [
                    true,
                    full,
                    hits > 0 && !full,
                    state_full,
                    reviews_pending,
                    !price_ok || state_price_bad,
                ];
                let base = verb * SIGNALS;
                signals
                    .iter()
                    .enumerate()
                    .filter(|(_, on)| **on)
                    .map(|(k, _)| (base + k, 1.0))
                    .collect::<SparseFeatures>()
            })
            .collect();
        Decision { action_features }
    }
}

impl fmt::Display for TaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render_task(self))
    }
}
