//! Built-in attack concept descriptions.
//!
//! The first four families repeat a distinctive core phrase in every
//! perspective, so encoders agree on them. The next four describe each
//! perspective in unrelated generic vocabulary. The two held-out families
//! borrow their vocabulary from the ambiguous ones.

use std::collections::BTreeMap;

use crate::encoding::{ConceptDescription, Perspective};

const BUILTIN: &[(&str, [&str; 3])] = &[
    (
        "arp_spoofing",
        [
            "arp cache poisoning with forged arp replies so the attacker intercepts local traffic",
            "arp cache poisoning shows as forged arp replies mapping one ip address to several mac addresses",
            "arp cache poisoning repeats forged arp replies slowly so intercepted local traffic keeps flowing",
        ],
    ),
    (
        "sql_injection",
        [
            "sql injection places sql fragments in web query parameters to read database tables",
            "sql injection shows as sql keywords and quotes in web query parameters with database errors",
            "sql injection encodes sql fragments across web query parameters to slip past filters and read database tables",
        ],
    ),
    (
        "port_scan",
        [
            "port scanning sends syn probes to many ports on many hosts to map open ports",
            "port scanning shows as syn probes to many ports on many hosts with few completed handshakes",
            "port scanning randomizes syn probes across ports and hosts and paces them slowly",
        ],
    ),
    (
        "brute_force",
        [
            "password brute forcing guesses ssh login passwords to obtain valid credentials",
            "password brute forcing shows as many failed ssh login attempts before a successful login",
            "password brute forcing spreads ssh login guesses across accounts with delays to avoid lockout",
        ],
    ),
    (
        "ddos_flood",
        [
            "overwhelm a server so legitimate users lose service",
            "sudden surge of packets from distributed sources saturating bandwidth",
            "botnet nodes rotate spoofed addresses and packet types to defeat rate filtering",
        ],
    ),
    (
        "botnet_c2",
        [
            "compromised machines take orders from a remote controller",
            "periodic beaconing from internal hosts toward an external server carrying small regular payloads",
            "command channels hide inside encrypted traffic using jittered intervals and rotating domains",
        ],
    ),
    (
        "data_exfiltration",
        [
            "steal sensitive files and move them outside the organization",
            "outbound volume spikes toward an unfamiliar external destination during long sessions",
            "compressed encrypted chunks travel over permitted protocols below volume alerting thresholds",
        ],
    ),
    (
        "ransomware",
        [
            "lock victim files and demand payment for recovery",
            "rapid rename and write activity across network shares adding new extensions",
            "staged rollout after disabling backups so restoration comes too late",
        ],
    ),
    (
        "dns_tunneling",
        [
            "smuggle stolen files and controller orders outside through name lookups",
            "periodic long lookups toward an unfamiliar external domain carrying small regular payloads",
            "encrypted chunks hide in lookups using rotating domains below volume alerting thresholds",
        ],
    ),
    (
        "slow_http_dos",
        [
            "exhaust server connections so legitimate users lose service",
            "long lived connections from distributed sources sending headers slowly",
            "connections rotate sources with jittered intervals to defeat rate filtering",
        ],
    ),
];

pub const DEFAULT_NOVEL: [&str; 2] = ["dns_tunneling", "slow_http_dos"];

pub fn builtin_catalog() -> BTreeMap<String, Vec<ConceptDescription>> {
    BUILTIN
        .iter()
        .map(|(id, texts)| {
            let descs = Perspective::ALL
                .iter()
                .zip(texts)
                .map(|(p, t)| ConceptDescription::new(*id, *p, *t).expect("non-empty builtin text"))
                .collect();
            ((*id).to_owned(), descs)
        })
        .collect()
}
