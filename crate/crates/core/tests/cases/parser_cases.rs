//! Parser cases shared by the parser suite and the acceptance run.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Input and its expected rendering.
pub const GOLDEN: &[(&str, &str)] = &[
    ("[f()]", "[f()]"),
    ("[f(x=1)]", "[f(x=1)]"),
    ("[ f ( x = 1 ) ]", "[f(x=1)]"),
    ("  \n[f(x=1)]\n  ", "[f(x=1)]"),
    ("[f(x=-42)]", "[f(x=-42)]"),
    ("[f(x=0)]", "[f(x=0)]"),
    ("[f(x=9223372036854775807)]", "[f(x=9223372036854775807)]"),
    ("[f(x=-9223372036854775808)]", "[f(x=-9223372036854775808)]"),
    ("[f(x=1.5)]", "[f(x=1.5)]"),
    ("[f(x=2.0)]", "[f(x=2.0)]"),
    ("[f(x=-0.25)]", "[f(x=-0.25)]"),
    ("[f(x=1e3)]", "[f(x=1000.0)]"),
    ("[f(x=2.5E-3)]", "[f(x=0.0025)]"),
    ("[f(x=1.0e0)]", "[f(x=1.0)]"),
    ("[f(x=True)]", "[f(x=true)]"),
    ("[f(x=true)]", "[f(x=true)]"),
    ("[f(x=False)]", "[f(x=false)]"),
    ("[f(x=false)]", "[f(x=false)]"),
    ("[f(x=None)]", "[f(x=null)]"),
    ("[f(x=null)]", "[f(x=null)]"),
    ("[f(s='hi')]", r#"[f(s="hi")]"#),
    (r#"[f(s="it's")]"#, r#"[f(s="it's")]"#),
    (r#"[f(s='say "hi"')]"#, r#"[f(s="say \"hi\"")]"#),
    (r"[f(s='it\'s')]", r#"[f(s="it's")]"#),
    (r#"[f(s="a\nb")]"#, r#"[f(s="a\nb")]"#),
    (r#"[f(s="tab\there")]"#, r#"[f(s="tab\there")]"#),
    (r#"[f(s="back\\slash")]"#, r#"[f(s="back\\slash")]"#),
    (r#"[f(s="été")]"#, r#"[f(s="été")]"#),
    (r#"[f(s="😀")]"#, r#"[f(s="😀")]"#),
    (r#"[f(s="\/path")]"#, r#"[f(s="/path")]"#),
    (r#"[f(s="\u0001")]"#, r#"[f(s="\u0001")]"#),
    (r#"[f(s="")]"#, r#"[f(s="")]"#),
    (r#"[f(s="ünïcode ✓")]"#, r#"[f(s="ünïcode ✓")]"#),
    ("[f(xs=[])]", "[f(xs=[])]"),
    ("[f(xs=[1,2,3])]", "[f(xs=[1, 2, 3])]"),
    ("[f(xs=[1,[2,[3,[4]]]])]", "[f(xs=[1, [2, [3, [4]]]])]"),
    ("[f(xs=[True, False, None])]", "[f(xs=[true, false, null])]"),
    ("[f(m={})]", "[f(m={})]"),
    (r#"[f(m={"b": 1, "a": 2})]"#, r#"[f(m={"b": 1, "a": 2})]"#),
    (r"[f(m={'k': [True, None, 1.5]})]", r#"[f(m={"k": [true, null, 1.5]})]"#),
    (
        r#"[f(m={"outer":{"inner":{"deep":"x"}}})]"#,
        r#"[f(m={"outer": {"inner": {"deep": "x"}}})]"#,
    ),
    (r#"[f(xs=[{"a": 1}, {"b": [2]}])]"#, r#"[f(xs=[{"a": 1}, {"b": [2]}])]"#),
    (
        r#"[f(m={"key with spaces": "v", "": 0})]"#,
        r#"[f(m={"key with spaces": "v", "": 0})]"#,
    ),
    (
        r#"[f(a=1, b="two", c=3.0, d=True, e=None)]"#,
        r#"[f(a=1, b="two", c=3.0, d=true, e=null)]"#,
    ),
    ("[f(x=1), g(y=2)]", "[f(x=1), g(y=2)]"),
    ("[f(x=1),g(y=2),h()]", "[f(x=1), g(y=2), h()]"),
    ("[math.sqrt(x=4)]", "[math.sqrt(x=4)]"),
    ("[_private(x=1)]", "[_private(x=1)]"),
    ("[f(_x=1, x_2=2)]", "[f(_x=1, x_2=2)]"),
    (
        r#"[transfer(src="A", dst="B", amount=30)]"#,
        r#"[transfer(src="A", dst="B", amount=30)]"#,
    ),
    (
        r#"[write_file(path="/home/user/todo.txt", content="line1\nline2")]"#,
        r#"[write_file(path="/home/user/todo.txt", content="line1\nline2")]"#,
    ),
    ("[f(\n    x=1,\n    y=[\n        2\n    ]\n)]", "[f(x=1, y=[2])]"),
];

/// Malformed input and the byte offset its error must point at.
pub const MALFORMED: &[(&str, usize)] = &[
    ("[f(x=]", 5),
    ("[f(x=1)", 7),
    ("[]", 1),
    ("[f(1)]", 3),
    ("[f(x=1, x=2)]", 8),
    (r#"[f(x="abc)]"#, 11),
    ("[f(x=1) g()]", 8),
    ("[f(x=1)] trailing", 9),
    ("[f(x=01.)]", 8),
    ("[f(x=maybe)]", 5),
    (r#"[f(x="\q")]"#, 6),
    ("[f(x={1: 2})]", 6),
    ("[f(x=1e)]", 7),
    ("[f(x=99999999999999999999)]", 5),
    ("[f(x=[1, 2)]", 10),
    (r#"[f(x="\ud83d")]"#, 12),
    ("[f(x=-)]", 6),
    ("[1.5(x=1)]", 1),
];

const ALPHABET: &[u8] = b"[](){}=,:'\"\\ .-+eE0123456789abcfxyzTrueFalseNonenull_\n\tu";

pub fn mutate(rng: &mut ChaCha8Rng, seed: &str) -> String {
    let mut bytes = seed.as_bytes().to_vec();
    for _ in 0..rng.gen_range(1..=4) {
        match rng.gen_range(0..4) {
            0 if !bytes.is_empty() => {
                let i = rng.gen_range(0..bytes.len());
                bytes.remove(i);
            }
            1 => {
                let i = rng.gen_range(0..=bytes.len());
                bytes.insert(i, ALPHABET[rng.gen_range(0..ALPHABET.len())]);
            }
            2 if !bytes.is_empty() => {
                let i = rng.gen_range(0..bytes.len());
                bytes[i] = ALPHABET[rng.gen_range(0..ALPHABET.len())];
            }
            _ => {
                let cut = rng.gen_range(0..=bytes.len());
                bytes.truncate(cut);
            }
        }
    }
    String::from_utf8_lossy(&bytes).into_owned()
}

pub fn random_text(rng: &mut ChaCha8Rng) -> String {
    let len = rng.gen_range(0..40);
    let mut s = String::from("[");
    for _ in 0..len {
        s.push(ALPHABET[rng.gen_range(0..ALPHABET.len())] as char);
    }
    s
}
