use serde::{Deserialize, Serialize};

use super::ContactClass;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoomType {
    Bedroom,
    Living,
    Dining,
    Library,
}

impl RoomType {
    pub const ALL: [RoomType; 4] = [RoomType::Bedroom, RoomType::Living, RoomType::Dining, RoomType::Library];

    pub fn name(self) -> &'static str {
        match self {
            RoomType::Bedroom => "bedroom",
            RoomType::Living => "living",
            RoomType::Dining => "dining",
            RoomType::Library => "library",
        }
    }

    pub fn catalogue(self) -> &'static Catalogue {
        match self {
            RoomType::Bedroom => &BEDROOM,
            RoomType::Living => &LIVING,
            RoomType::Dining => &DINING,
            RoomType::Library => &LIBRARY,
        }
    }
}

impl std::str::FromStr for RoomType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        RoomType::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| format!("unknown room type '{s}'"))
    }
}

/// Where an object sits in the room.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    Floor,
    /// Back against a wall, front facing into the room.
    Wall,
    /// Hanging from the ceiling.
    Ceiling,
}

/// Object category with its size prior. Sizes are full extents in meters
/// (width along local x, height, depth along local z); the front faces
/// local +z.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Category {
    pub name: &'static str,
    pub weight: f64,
    pub size: [f64; 3],
    pub placement: Placement,
    pub contacts: &'static [ContactClass],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Catalogue {
    pub room: RoomType,
    pub categories: &'static [Category],
}

impl Catalogue {
    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.categories.iter().position(|c| c.name == name)
    }

    /// Category probabilities implied by the weights.
    pub fn priors(&self) -> Vec<f64> {
        let total: f64 = self.categories.iter().map(|c| c.weight).sum();
        self.categories.iter().map(|c| c.weight / total).collect()
    }

    pub fn supports(&self, category: usize, class: ContactClass) -> bool {
        self.categories.get(category).is_some_and(|c| c.contacts.contains(&class))
    }

    /// Largest half extent along each axis, before jitter.
    pub fn max_half_extents(&self) -> [f64; 3] {
        let mut m = [0.0f64; 3];
        for c in self.categories {
            for a in 0..3 {
                m[a] = m[a].max(c.size[a] / 2.0);
            }
        }
        m
    }
}

use ContactClass::{Lying as L, Sitting as S, Touching as T};
use Placement::{Ceiling, Floor, Wall};

const SEAT: &[ContactClass] = &[S];
const SOFA: &[ContactClass] = &[S, L];
const BED: &[ContactClass] = &[L];
const SURFACE: &[ContactClass] = &[T];
const NONE: &[ContactClass] = &[];

macro_rules! cat {
    ($name:literal, $w:expr, [$x:expr, $y:expr, $z:expr], $p:expr, $c:expr) => {
        Category { name: $name, weight: $w, size: [$x, $y, $z], placement: $p, contacts: $c }
    };
}

static BEDROOM: Catalogue = Catalogue {
    room: RoomType::Bedroom,
    categories: &[
        cat!("armchair", 3.0, [0.8, 0.85, 0.8], Floor, SEAT),
        cat!("bookshelf", 3.0, [1.0, 1.9, 0.35], Wall, SURFACE),
        cat!("cabinet", 4.0, [0.9, 0.9, 0.45], Wall, SURFACE),
        cat!("ceiling_lamp", 6.0, [0.5, 0.2, 0.5], Ceiling, NONE),
        cat!("chair", 5.0, [0.5, 0.9, 0.55], Floor, SEAT),
        cat!("children_cabinet", 2.0, [0.8, 1.0, 0.45], Wall, SURFACE),
        cat!("coffee_table", 2.0, [1.0, 0.45, 0.6], Floor, SURFACE),
        cat!("desk", 4.0, [1.2, 0.75, 0.6], Wall, SURFACE),
        cat!("double_bed", 9.0, [1.8, 0.55, 2.1], Wall, BED),
        cat!("dressing_chair", 2.0, [0.45, 0.8, 0.45], Floor, SEAT),
        cat!("dressing_table", 3.0, [1.0, 0.75, 0.45], Wall, SURFACE),
        cat!("kids_bed", 2.0, [1.0, 0.6, 1.9], Wall, BED),
        cat!("nightstand", 12.0, [0.5, 0.55, 0.45], Wall, SURFACE),
        cat!("pendant_lamp", 8.0, [0.4, 0.6, 0.4], Ceiling, NONE),
        cat!("shelf", 3.0, [0.8, 1.2, 0.3], Wall, SURFACE),
        cat!("single_bed", 3.0, [1.0, 0.5, 2.0], Wall, BED),
        cat!("sofa", 2.0, [1.8, 0.85, 0.9], Floor, SOFA),
        cat!("stool", 2.0, [0.4, 0.45, 0.4], Floor, SEAT),
        cat!("table", 3.0, [1.2, 0.75, 0.8], Floor, SURFACE),
        cat!("tv_stand", 4.0, [1.6, 0.5, 0.45], Wall, SURFACE),
        cat!("wardrobe", 14.0, [1.6, 2.1, 0.6], Wall, SURFACE),
    ],
};

static LIVING: Catalogue = Catalogue {
    room: RoomType::Living,
    categories: &[
        cat!("armchair", 5.0, [0.8, 0.85, 0.8], Floor, SEAT),
        cat!("bookshelf", 3.0, [1.0, 1.9, 0.35], Wall, SURFACE),
        cat!("cabinet", 4.0, [0.9, 0.9, 0.45], Wall, SURFACE),
        cat!("ceiling_lamp", 5.0, [0.5, 0.2, 0.5], Ceiling, NONE),
        cat!("chaise_longue_sofa", 2.0, [1.7, 0.8, 0.8], Floor, SOFA),
        cat!("chinese_chair", 2.0, [0.55, 1.0, 0.55], Floor, SEAT),
        cat!("coffee_table", 8.0, [1.0, 0.45, 0.6], Floor, SURFACE),
        cat!("console_table", 3.0, [1.2, 0.8, 0.4], Wall, SURFACE),
        cat!("corner_side_table", 4.0, [0.5, 0.55, 0.5], Floor, SURFACE),
        cat!("desk", 2.0, [1.2, 0.75, 0.6], Wall, SURFACE),
        cat!("dining_chair", 9.0, [0.48, 0.9, 0.52], Floor, SEAT),
        cat!("dining_table", 5.0, [1.6, 0.75, 0.9], Floor, SURFACE),
        cat!("l_shaped_sofa", 3.0, [2.6, 0.85, 1.6], Floor, SOFA),
        cat!("lazy_sofa", 2.0, [0.8, 0.6, 0.8], Floor, SEAT),
        cat!("lounge_chair", 3.0, [0.75, 0.85, 0.85], Floor, SEAT),
        cat!("loveseat_sofa", 3.0, [1.5, 0.85, 0.85], Floor, SOFA),
        cat!("multi_seat_sofa", 7.0, [2.2, 0.85, 0.95], Floor, SOFA),
        cat!("pendant_lamp", 7.0, [0.4, 0.6, 0.4], Ceiling, NONE),
        cat!("round_end_table", 3.0, [0.55, 0.55, 0.55], Floor, SURFACE),
        cat!("shelf", 3.0, [0.8, 1.2, 0.3], Wall, SURFACE),
        cat!("stool", 2.0, [0.4, 0.45, 0.4], Floor, SEAT),
        cat!("tv_stand", 7.0, [1.6, 0.5, 0.45], Wall, SURFACE),
        cat!("wardrobe", 2.0, [1.6, 2.1, 0.6], Wall, SURFACE),
        cat!("wine_cabinet", 2.0, [0.9, 1.8, 0.45], Wall, SURFACE),
    ],
};

static DINING: Catalogue = Catalogue {
    room: RoomType::Dining,
    categories: &[
        cat!("armchair", 2.0, [0.8, 0.85, 0.8], Floor, SEAT),
        cat!("bookshelf", 2.0, [1.0, 1.9, 0.35], Wall, SURFACE),
        cat!("cabinet", 4.0, [0.9, 0.9, 0.45], Wall, SURFACE),
        cat!("ceiling_lamp", 4.0, [0.5, 0.2, 0.5], Ceiling, NONE),
        cat!("chaise_longue_sofa", 1.0, [1.7, 0.8, 0.8], Floor, SOFA),
        cat!("chinese_chair", 3.0, [0.55, 1.0, 0.55], Floor, SEAT),
        cat!("coffee_table", 3.0, [1.0, 0.45, 0.6], Floor, SURFACE),
        cat!("console_table", 3.0, [1.2, 0.8, 0.4], Wall, SURFACE),
        cat!("corner_side_table", 2.0, [0.5, 0.55, 0.5], Floor, SURFACE),
        cat!("desk", 1.0, [1.2, 0.75, 0.6], Wall, SURFACE),
        cat!("dining_chair", 22.0, [0.48, 0.9, 0.52], Floor, SEAT),
        cat!("dining_table", 12.0, [1.6, 0.75, 0.9], Floor, SURFACE),
        cat!("l_shaped_sofa", 1.0, [2.6, 0.85, 1.6], Floor, SOFA),
        cat!("lazy_sofa", 1.0, [0.8, 0.6, 0.8], Floor, SEAT),
        cat!("lounge_chair", 2.0, [0.75, 0.85, 0.85], Floor, SEAT),
        cat!("loveseat_sofa", 1.0, [1.5, 0.85, 0.85], Floor, SOFA),
        cat!("multi_seat_sofa", 2.0, [2.2, 0.85, 0.95], Floor, SOFA),
        cat!("pendant_lamp", 8.0, [0.4, 0.6, 0.4], Ceiling, NONE),
        cat!("round_end_table", 2.0, [0.55, 0.55, 0.55], Floor, SURFACE),
        cat!("shelf", 3.0, [0.8, 1.2, 0.3], Wall, SURFACE),
        cat!("stool", 3.0, [0.4, 0.45, 0.4], Floor, SEAT),
        cat!("tv_stand", 2.0, [1.6, 0.5, 0.45], Wall, SURFACE),
        cat!("wardrobe", 1.0, [1.6, 2.1, 0.6], Wall, SURFACE),
        cat!("wine_cabinet", 5.0, [0.9, 1.8, 0.45], Wall, SURFACE),
    ],
};

static LIBRARY: Catalogue = Catalogue {
    room: RoomType::Library,
    categories: &[
        cat!("armchair", 5.0, [0.8, 0.85, 0.8], Floor, SEAT),
        cat!("bookshelf", 16.0, [1.0, 1.9, 0.35], Wall, SURFACE),
        cat!("cabinet", 5.0, [0.9, 0.9, 0.45], Wall, SURFACE),
        cat!("ceiling_lamp", 4.0, [0.5, 0.2, 0.5], Ceiling, NONE),
        cat!("chaise_longue_sofa", 1.0, [1.7, 0.8, 0.8], Floor, SOFA),
        cat!("chinese_chair", 3.0, [0.55, 1.0, 0.55], Floor, SEAT),
        cat!("coffee_table", 2.0, [1.0, 0.45, 0.6], Floor, SURFACE),
        cat!("console_table", 2.0, [1.2, 0.8, 0.4], Wall, SURFACE),
        cat!("corner_side_table", 2.0, [0.5, 0.55, 0.5], Floor, SURFACE),
        cat!("desk", 10.0, [1.2, 0.75, 0.6], Wall, SURFACE),
        cat!("dining_chair", 5.0, [0.48, 0.9, 0.52], Floor, SEAT),
        cat!("dining_table", 2.0, [1.6, 0.75, 0.9], Floor, SURFACE),
        cat!("dressing_chair", 3.0, [0.45, 0.8, 0.45], Floor, SEAT),
        cat!("dressing_table", 1.0, [1.0, 0.75, 0.45], Wall, SURFACE),
        cat!("l_shaped_sofa", 1.0, [2.6, 0.85, 1.6], Floor, SOFA),
        cat!("lazy_sofa", 1.0, [0.8, 0.6, 0.8], Floor, SEAT),
        cat!("lounge_chair", 3.0, [0.75, 0.85, 0.85], Floor, SEAT),
        cat!("loveseat_sofa", 1.0, [1.5, 0.85, 0.85], Floor, SOFA),
        cat!("multi_seat_sofa", 2.0, [2.2, 0.85, 0.95], Floor, SOFA),
        cat!("pendant_lamp", 6.0, [0.4, 0.6, 0.4], Ceiling, NONE),
        cat!("round_end_table", 2.0, [0.55, 0.55, 0.55], Floor, SURFACE),
        cat!("shelf", 6.0, [0.8, 1.2, 0.3], Wall, SURFACE),
        cat!("stool", 2.0, [0.4, 0.45, 0.4], Floor, SEAT),
        cat!("wardrobe", 3.0, [1.6, 2.1, 0.6], Wall, SURFACE),
        cat!("wine_cabinet", 2.0, [0.9, 1.8, 0.45], Wall, SURFACE),
    ],
};
