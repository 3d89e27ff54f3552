//! Category, action and HOI-class registries of a dataset.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PERSON;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Registry {
    /// Object categories; index 0 is always `person`.
    pub categories: Vec<String>,
    pub actions: Vec<String>,
    /// Valid `(action, object category)` combinations; the index is the HOI
    /// class id.
    pub hoi_classes: Vec<(usize, usize)>,
    #[serde(skip)]
    lookup: HashMap<(usize, usize), usize>,
}

impl Registry {
    pub fn new(categories: Vec<String>, actions: Vec<String>, hoi_classes: Vec<(usize, usize)>) -> Result<Self> {
        let mut r = Self {
            categories,
            actions,
            hoi_classes,
            lookup: HashMap::new(),
        };
        r.rebuild()?;
        Ok(r)
    }

    /// Every action paired with every category.
    pub fn dense(categories: Vec<String>, actions: Vec<String>) -> Result<Self> {
        let classes = (0..actions.len())
            .flat_map(|a| (0..categories.len()).map(move |c| (a, c)))
            .collect();
        Self::new(categories, actions, classes)
    }

    /// Validates ids and rebuilds the class lookup; call after deserializing.
    pub fn rebuild(&mut self) -> Result<()> {
        if self.categories.first().map(String::as_str) != Some("person") {
            return Err(Error::InvalidConfig("category 0 must be `person`".into()));
        }
        self.lookup.clear();
        for (id, &(a, c)) in self.hoi_classes.iter().enumerate() {
            self.check_action(a)?;
            self.check_category(c)?;
            if self.lookup.insert((a, c), id).is_some() {
                return Err(Error::InvalidConfig(format!("duplicate HOI class ({a}, {c})")));
            }
        }
        Ok(())
    }

    pub fn num_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn num_actions(&self) -> usize {
        self.actions.len()
    }

    pub fn num_classes(&self) -> usize {
        self.hoi_classes.len()
    }

    pub fn class_of(&self, action: usize, category: usize) -> Option<usize> {
        self.lookup.get(&(action, category)).copied()
    }

    pub fn category_name(&self, id: usize) -> Result<&str> {
        self.check_category(id)?;
        Ok(&self.categories[id])
    }

    pub fn category_id(&self, name: &str) -> Result<usize> {
        self.categories
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::UnknownCategory(name.to_string()))
    }

    pub fn check_category(&self, id: usize) -> Result<()> {
        if id < self.categories.len() {
            Ok(())
        } else {
            Err(Error::UnknownId {
                registry: "category",
                id,
            })
        }
    }

    pub fn check_action(&self, id: usize) -> Result<()> {
        if id < self.actions.len() {
            Ok(())
        } else {
            Err(Error::UnknownId { registry: "action", id })
        }
    }

    pub fn person(&self) -> usize {
        PERSON
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn dense_registry_covers_all_combinations() {
        let r = Registry::dense(names(&["person", "cup", "bicycle"]), names(&["hold", "ride"])).unwrap();
        assert_eq!(r.num_classes(), 6);
        assert_eq!(r.class_of(1, 2), Some(5));
        assert_eq!(r.category_id("cup").unwrap(), 1);
        assert!(matches!(r.category_id("dog"), Err(Error::UnknownCategory(_))));
    }

    #[test]
    fn invalid_ids_fail_loudly() {
        assert!(Registry::new(names(&["person"]), names(&["a"]), vec![(0, 3)]).is_err());
        assert!(Registry::new(names(&["cup", "person"]), names(&["a"]), vec![]).is_err());
        assert!(Registry::new(names(&["person"]), names(&["a"]), vec![(0, 0), (0, 0)]).is_err());
    }
}
