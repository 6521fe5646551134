use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{IngestError, Result};

// Categories in task order; the 10-class task uses the first ten.
const CATEGORIES: [(&str, &str); 20] = [
    ("Dog", "n02084071"),
    ("Cat", "n02121620"),
    ("Bird", "n01503061"),
    ("Fish", "n02512053"),
    ("Goose", "n01855672"),
    ("Car", "n02958343"),
    ("Truck", "n04490091"),
    ("Airplane", "n02691156"),
    ("Ship", "n04194289"),
    ("Bicycle", "n02834778"),
    ("Horse", "n02374451"),
    ("Elephant", "n02503517"),
    ("Bear", "n02131653"),
    ("Frog", "n01639765"),
    ("Snake", "n01726692"),
    ("Train", "n04468005"),
    ("Motorcycle", "n03790512"),
    ("Bus", "n02924116"),
    ("Butterfly", "n02274259"),
    ("Tractor", "n04465501"),
];

const AIRCRAFT: (&str, &str) = ("Aircraft", "n02686568");
const ANIMAL_ROOT: &str = "n00015388";
const VEHICLE_ROOT: &str = "n04524313";

/// Class names plus the synsets that map onto each class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LabelMapRepr", into = "LabelMapRepr")]
pub struct LabelMap {
    classes: Vec<String>,
    synsets: Vec<Vec<String>>,
    lookup: BTreeMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct LabelMapRepr {
    classes: Vec<String>,
    synsets: Vec<Vec<String>>,
}

impl TryFrom<LabelMapRepr> for LabelMap {
    type Error = IngestError;

    fn try_from(r: LabelMapRepr) -> Result<LabelMap> {
        if r.classes.len() != r.synsets.len() {
            return Err(IngestError::InvalidSpec(
                "class and synset lists differ in length".into(),
            ));
        }
        LabelMap::new(r.classes.into_iter().zip(r.synsets).collect())
    }
}

impl From<LabelMap> for LabelMapRepr {
    fn from(m: LabelMap) -> LabelMapRepr {
        LabelMapRepr {
            classes: m.classes,
            synsets: m.synsets,
        }
    }
}

impl LabelMap {
    /// Each entry is a class name and its synsets; the first synset is the
    /// one the synthetic writer uses.
    pub fn new(entries: Vec<(String, Vec<String>)>) -> Result<LabelMap> {
        if entries.len() < 2 {
            return Err(IngestError::InvalidSpec("a label map needs at least 2 classes".into()));
        }
        let mut lookup = BTreeMap::new();
        for (class, (name, synsets)) in entries.iter().enumerate() {
            if synsets.is_empty() {
                return Err(IngestError::InvalidSpec(format!("class {name} has no synsets")));
            }
            for s in synsets {
                if lookup.insert(s.clone(), class).is_some() {
                    return Err(IngestError::InvalidSpec(format!("synset {s} maps to two classes")));
                }
            }
        }
        let (classes, synsets) = entries.into_iter().unzip();
        Ok(LabelMap {
            classes,
            synsets,
            lookup,
        })
    }

    /// Category table for an `n`-class task: Animals/Vehicles for 2, the
    /// Dog/Cat/Bird/Car/Aircraft set for 5, and a prefix of the fixed
    /// 20-category list otherwise.
    pub fn for_task(n: usize) -> Result<LabelMap> {
        let owned = |pairs: &[(&str, &str)]| -> Vec<(String, Vec<String>)> {
            pairs
                .iter()
                .map(|(n, s)| (n.to_string(), vec![s.to_string()]))
                .collect()
        };
        let entries = match n {
            2 => {
                let is_vehicle = |name: &str| {
                    matches!(
                        name,
                        "Car" | "Truck" | "Airplane" | "Ship" | "Bicycle" | "Train" | "Motorcycle" | "Bus" | "Tractor"
                    )
                };
                let mut animals = vec![ANIMAL_ROOT.to_string()];
                let mut vehicles = vec![VEHICLE_ROOT.to_string(), AIRCRAFT.1.to_string()];
                for (name, syn) in CATEGORIES {
                    if is_vehicle(name) {
                        vehicles.push(syn.to_string());
                    } else {
                        animals.push(syn.to_string());
                    }
                }
                vec![("Animals".to_string(), animals), ("Vehicles".to_string(), vehicles)]
            }
            5 => owned(&[CATEGORIES[0], CATEGORIES[1], CATEGORIES[2], CATEGORIES[5], AIRCRAFT]),
            3..=20 => owned(&CATEGORIES[..n]),
            _ => {
                return Err(IngestError::InvalidSpec(format!(
                    "no category table for {n} classes (supported: 2..=20)"
                )))
            }
        };
        LabelMap::new(entries)
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn class_name(&self, class: usize) -> Option<&str> {
        self.classes.get(class).map(String::as_str)
    }

    pub fn class_names(&self) -> &[String] {
        &self.classes
    }

    pub fn primary_synset(&self, class: usize) -> Option<&str> {
        self.synsets.get(class).and_then(|s| s.first()).map(String::as_str)
    }

    pub fn label_of(&self, synset: &str) -> Option<usize> {
        self.lookup.get(synset).copied()
    }
}
