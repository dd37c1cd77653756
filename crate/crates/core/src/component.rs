use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// The three parts of a recipe document.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Title,
    Ingredients,
    Instructions,
}

impl Component {
    pub const ALL: [Component; 3] = [
        Component::Title,
        Component::Ingredients,
        Component::Instructions,
    ];

    /// Concatenation order fed to the merge layer.
    pub const MERGE_ORDER: [Component; 3] = [
        Component::Ingredients,
        Component::Instructions,
        Component::Title,
    ];

    pub fn index(self) -> usize {
        match self {
            Component::Title => 0,
            Component::Ingredients => 1,
            Component::Instructions => 2,
        }
    }

    pub fn short_name(self) -> &'static str {
        match self {
            Component::Title => "ttl",
            Component::Ingredients => "ing",
            Component::Instructions => "ins",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Component::Title => "title",
            Component::Ingredients => "ingredients",
            Component::Instructions => "instructions",
        }
    }

    /// All six ordered pairs `(target, source)` with `target != source`.
    pub fn ordered_pairs() -> impl Iterator<Item = (Component, Component)> {
        Self::ALL
            .into_iter()
            .flat_map(|a| Self::ALL.into_iter().map(move |b| (a, b)))
            .filter(|(a, b)| a != b)
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Component {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "title" | "ttl" => Ok(Component::Title),
            "ingredients" | "ing" => Ok(Component::Ingredients),
            "instructions" | "ins" => Ok(Component::Instructions),
            other => Err(format!("unknown recipe component {other:?}")),
        }
    }
}

/// Small set of components.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct ComponentSet(u8);

impl ComponentSet {
    pub const EMPTY: ComponentSet = ComponentSet(0);
    pub const FULL: ComponentSet = ComponentSet(0b111);

    pub fn contains(self, c: Component) -> bool {
        self.0 & (1 << c.index()) != 0
    }

    pub fn insert(&mut self, c: Component) {
        self.0 |= 1 << c.index();
    }

    pub fn remove(&mut self, c: Component) {
        self.0 &= !(1 << c.index());
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn iter(self) -> impl Iterator<Item = Component> {
        Component::ALL
            .into_iter()
            .filter(move |&c| self.contains(c))
    }
}

impl FromIterator<Component> for ComponentSet {
    fn from_iter<I: IntoIterator<Item = Component>>(iter: I) -> Self {
        let mut s = ComponentSet::EMPTY;
        for c in iter {
            s.insert(c);
        }
        s
    }
}
