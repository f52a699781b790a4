//! Built-in taxonomies: location function categories, user mobility groups,
//! and the task prompt that seeds the trainable prefix.
//!
//! The description texts feed the text encoder to produce semantic priors
//! for the function experts and the user-group experts. They can be replaced
//! at run time by a precomputed prior matrix (see [`crate::text`]).

pub const NUM_FUNCTION_CATEGORIES: usize = 5;
pub const NUM_USER_GROUPS: usize = 11;

pub const FUNCTION_CATEGORIES: [&str; NUM_FUNCTION_CATEGORIES] = [
    "Entertainment",
    "Commercial",
    "Education",
    "Public Service",
    "Residential",
];

pub const FUNCTION_CATEGORY_DESCRIPTIONS: [&str; NUM_FUNCTION_CATEGORIES] = [
    "Venues where people spend leisure time: cinemas, theatres, bars, karaoke lounges, \
     stadiums, gyms, parks, and amusement arcades. Visits cluster in the evening and on \
     weekends and usually last one to four hours.",
    "Places of business and trade: shopping malls, supermarkets, restaurants, cafes, banks, \
     hotels, and office towers. Foot traffic peaks at lunchtime and again after standard \
     working hours.",
    "Campuses and teaching facilities: kindergartens, primary and secondary schools, \
     universities, training centres, and libraries. Occupied on weekday daytimes by \
     students and staff following term-time schedules.",
    "Civic and institutional sites: government offices, hospitals, clinics, police and fire \
     stations, post offices, transit hubs, and museums. Visits are purposeful and often \
     tied to appointments, paperwork, or duty shifts.",
    "Housing areas: apartment blocks, dormitories, gated communities, and suburban homes. \
     The usual origin and end point of daily travel, occupied overnight and in the early \
     morning.",
];

pub const USER_GROUPS: [&str; NUM_USER_GROUPS] = [
    "Student",
    "Teacher",
    "Office Worker",
    "Visitor",
    "Night Shift Worker",
    "Remote Worker",
    "Service Industry Worker",
    "Public Service Official",
    "Fitness Enthusiast",
    "Retail Employee",
    "Undefined Persona",
];

pub const USER_GROUP_DESCRIPTIONS: [&str; NUM_USER_GROUPS] = [
    "Attends classes on a fixed term-time timetable. Weekday daytime hours concentrate on \
     one campus; lunch is taken at eateries close to school, and evenings alternate \
     between study venues and the family home.",
    "Works at a school or university with an early, regular start. Spends the core of the \
     weekday on campus, runs occasional errands after classes, and returns home at a \
     consistent hour.",
    "Commutes to the same business district on weekday mornings, stays near the office \
     through the afternoon with a short lunch radius, and travels home in the evening \
     rush.",
    "A short-term guest without an established routine. Moves between sights, shopping \
     streets, and eateries across the city with stops that are hard to anticipate, \
     returning to lodgings at night.",
    "Works while most of the city sleeps. Departs for the workplace late in the evening, \
     stays through the night, and spends much of the daytime resting at home.",
    "Has no fixed workplace. Alternates between the home, cafes, and co-working spots at \
     flexible hours, with midday movement more common than a morning commute.",
    "Employed at restaurants, shops, or hospitality venues on rotating early and late \
     shifts. Start times vary across the week and weekends are often working days.",
    "Staffs a government office, hospital, or station on scheduled duty rotations. \
     Attendance is highly regular but may fall on days, evenings, or nights depending on \
     the roster.",
    "Builds the day around exercise. Frequents gyms, pools, courts, and parks before or \
     after work, keeping workout slots stable from week to week.",
    "Works behind a counter at a mall or street-front store. Shifts start mid-morning and \
     run through the day, with weekday days off instead of weekends.",
    "No clear group signature. The movement history is too sparse or too irregular to \
     match a known routine, so predictions must lean on the trajectory itself.",
];

/// Instruction text whose token encodings seed the trainable prefix.
pub const TASK_PROMPT: &str =
    "You are a mobility assistant. Given a user's recent visit history and current \
     trajectory, predict the coordinates of the next place they will visit. Favour \
     locations consistent with the user's routine and with the current time of day.";

/// Index of the Residential category, which every synthetic persona needs
/// for a home location.
pub const RESIDENTIAL: usize = 4;
