#!/usr/bin/env python3
"""Writes the entity-representation fixtures and their expected outputs.

The cleaning, paragraph and refusal rules are re-implemented here from their
written definitions, independently of the crate, so the golden files are an
external reference for the Rust builders.

Usage: er_fixtures.py OUT_DIR PATTERNS_FILE
"""
import json
import re
import sys
import unicodedata
from pathlib import Path

SYSTEM = ("You are a helpful assistant designed to give a comprehensive "
          "introduction about people. Who is this one?")
FOLLOW_UP = "Please provide more detailed information."
MAX_TOKENS = 256


def token_spans(text):
    spans, start = [], None
    for i, ch in enumerate(text):
        if ch.isalnum():
            if start is None:
                start = i
            continue
        if start is not None:
            spans.append((start, i))
            start = None
        if not ch.isspace():
            spans.append((i, i + 1))
    if start is not None:
        spans.append((start, len(text)))
    return spans


def clean(raw, max_tokens=MAX_TOKENS):
    s = "".join(" " if c.isspace() else c for c in raw
                if c.isspace() or unicodedata.category(c) != "Cc")
    while True:
        t = re.sub(r"\[[0-9]+\]", "", s)
        if t == s:
            break
        s = t
    s = " ".join(s.split())
    spans = token_spans(s)
    if len(spans) <= max_tokens:
        return s
    if max_tokens == 0:
        return ""
    return s[:spans[max_tokens - 1][1]].rstrip()


def paragraphs(extract):
    out, cur = [], []
    for line in extract.split("\n"):
        if line.strip() == "":
            if cur:
                out.append(" ".join(cur))
                cur = []
        else:
            cur.append(line.strip())
    if cur:
        out.append(" ".join(cur))
    return out


def static_er(pages, name):
    extract = pages.get(name)
    if extract is None:
        return None
    text = clean(" ".join(paragraphs(extract)[:2]))
    return text or None


def dumps(obj):
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


LONG = " ".join(f"Term{i}," for i in range(300))

ENTITIES = [
    ("Q1", "Bruce Golding", "person"),
    ("Q2", "William Golding", "person"),
    ("Q3", "Enno Hagenah", "person"),
    ("Q4", "Mara Lindqvist", "person"),
    ("Q5", "Tomas Okafor", "person"),
    ("Q6", "Jürgen Weiß", "person"),
    ("Q7", "Ada Kovač", "person"),
    ("Q8", "Lena Moreau", "person"),
    ("Q9", "Port Aldine", "location"),
    ("Q10", "Rivera Hall", "building"),
    ("Q11", "Sven Aaltonen", "person"),
    ("Q12", "Nadia Rahim", "person"),
    ("Q13", "Oscar Prieto", "person"),
    ("Q14", "Hana Sato", "person"),
    ("Q15", "Kofi Mensah", "person"),
    ("Q16", "Irene Duval", "person"),
    ("Q17", "Pavel Novak", "person"),
    ("Q18", "Elsa Brandt", "person"),
    ("Q19", "Unknown Person", "person"),
    ("Q20", "Marco Bellini", "person"),
]

PAGES = {
    "Bruce Golding": "Orette Bruce Golding (born 5 December 1947) is a Jamaican former politician[1] who served as Prime Minister.[2]\n\nHe led the Jamaica Labour Party from 2005 to 2011.[3]\n\nGolding was born in Clarendon.",
    "William Golding": "Sir William Gerald Golding was a British novelist,\nplaywright, and poet.[1]\n\nHe won the Nobel Prize in Literature in 1983.",
    "Enno Hagenah": "Enno Hagenah (born 1957) is a German politician of Alliance 90/The Greens.\n\n\n\nHe was a member of the Landtag of Lower Saxony.[12]",
    "Mara Lindqvist": "Mara  Lindqvist\tis a Swedish\tjournalist.\n\nShe writes for a daily newspaper.\n\nShe lives in Uppsala.\n\nFourth paragraph.",
    "Tomas Okafor": "Tomas Okafor is a Nigerian-born engineer\x07 and inventor.[4][5]\n\nHe holds several patents.",
    "Jürgen Weiß": "Jürgen Weiß ist ein deutscher Politiker (CDU).\n\nEr war Bürgermeister von Kleinstadt.",
    "Ada Kovač": "Ada Kovač is a Croatian chess grandmaster.[[1]2]",
    "Lena Moreau": "   \n\nLena Moreau is a French painter.\n\nHer work was shown in Lyon.",
    "Port Aldine": "Port Aldine is a fictional harbour town. " + LONG + "\n\nSecond paragraph after a long first one.",
    "Rivera Hall": "Rivera Hall is a concert venue.\r\n\r\nIt opened in 1931.",
    "Sven Aaltonen": "Sven Aaltonen is a Finnish ice hockey player[citation needed].\n\nHe played in Liiga.",
    "Nadia Rahim": "Nadia Rahim is a Bangladeshi economist.\n\nShe chairs a research institute.",
    "Oscar Prieto": "Oscar Prieto is a Spanish footballer.\n\nHe plays as a midfielder.",
    "Hana Sato": "Hana Sato is a Japanese architect.\n\nShe designed several museums.",
    "Kofi Mensah": "Kofi Mensah is a Ghanaian poet.\n\nHis collections are taught in schools.",
    "Irene Duval": "[1][2]\n\nIrene Duval is a Belgian cyclist.",
    "Pavel Novak": "Pavel Novak is a Czech composer.\n\nHe wrote three operas.",
    "Elsa Brandt": "Elsa Brandt is a Danish actress.\n\nShe appeared in crime dramas.",
    "Unknown Person": None,
    "Marco Bellini": "Marco Bellini is an Italian chef.\n\nHe runs a restaurant in Turin.",
}

# Round-1 answers for the dynamic set; a second element marks a scripted round-2 answer.
DYNAMIC = {
    "Bruce Golding": ("Bruce Golding is a Jamaican politician who served as the eighth Prime Minister of Jamaica.", None),
    "Enno Hagenah": ("Without more specific information, it is difficult to determine who Enno Hagenah is.",
                     "Enno Hagenah is a German Green Party politician and former member of the Lower Saxony parliament."),
    "Mara Lindqvist": ("Mara Lindqvist is a Swedish journalist. More specific information about her career is public.", None),
    "Tomas Okafor": ("Tomas Okafor appears to be a PRIVATE INDIVIDUAL, so I cannot share details.",
                     "I'm sorry, but Tomas Okafor is a private individual."),
    "Jürgen Weiß": ("Jürgen Weiß is a German CDU politician.", None),
    "Ada Kovač": ("Ada Kovač is a Croatian chess grandmaster known for her endgame technique.[3]", None),
    "Lena Moreau": ("Lena Moreau is a French painter; information about her specific exhibitions is limited.", None),
    "Rivera Hall": ("Rivera Hall is a concert venue that opened in 1931.", None),
    "Kofi Mensah": ("Kofi Mensah is a Ghanaian poet whose work is widely taught.", None),
    "Elsa Brandt": ("Elsa Brandt is a Danish actress.\n\nShe is known for crime dramas.", None),
}


def main():
    out = Path(sys.argv[1])
    patterns = [l.strip().lower() for l in Path(sys.argv[2]).read_text().splitlines()
                if l.strip() and not l.lstrip().startswith("#")]

    def refused(text):
        folded = text.lower()
        return any(p in folded for p in patterns)

    out.mkdir(parents=True, exist_ok=True)
    entities = [{"qid": q, "name": n, "type_tag": t, "er_text": "", "er_source": "property"}
                for q, n, t in ENTITIES]
    (out / "entities.jsonl").write_text("".join(dumps(e) + "\n" for e in entities))
    (out / "kb_pages.json").write_text(json.dumps({"pages": PAGES}, ensure_ascii=False, indent=2) + "\n")

    golden, dropped = [], []
    for e in entities:
        text = static_er(PAGES, e["name"])
        if text is None:
            dropped.append(e["qid"])
            continue
        golden.append(dict(e, er_text=text, er_source="static"))
    (out / "static_golden.jsonl").write_text("".join(dumps(e) + "\n" for e in golden))

    dyn_entities = [e for e in entities if e["name"] in DYNAMIC]
    (out / "dynamic_entities.jsonl").write_text("".join(dumps(e) + "\n" for e in dyn_entities))
    chats, expected = [], {}
    for e in dyn_entities:
        name = e["name"]
        first, second = DYNAMIC[name]
        msgs = [{"role": "system", "content": SYSTEM}, {"role": "user", "content": name}]
        chats.append({"messages": msgs, "response": first})
        if not refused(first):
            assert second is None, name
            text = clean(first)
            expected[e["qid"]] = {"rounds": 1, "er_text": text or None}
            continue
        assert second is not None, name
        context = static_er(PAGES, name)
        follow = f"{context} {FOLLOW_UP}" if context else FOLLOW_UP
        msgs2 = msgs + [{"role": "assistant", "content": first}, {"role": "user", "content": follow}]
        chats.append({"messages": msgs2, "response": second})
        text = None if refused(second) else (clean(second) or None)
        expected[e["qid"]] = {"rounds": 2, "er_text": text}
    (out / "llm_chats.jsonl").write_text("".join(dumps(c) + "\n" for c in chats))
    (out / "dynamic_expected.json").write_text(json.dumps(expected, ensure_ascii=False, indent=2, sort_keys=True) + "\n")
    print(f"static: {len(golden)} built, dropped {dropped}; dynamic: "
          f"{sum(v['rounds'] == 2 for v in expected.values())} second rounds")


if __name__ == "__main__":
    main()
