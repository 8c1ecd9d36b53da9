"""Template-based synthetic (summary, conversation) corpora.

Records use raw personal names so they exercise the anonymization path. The
summary facts are all stated somewhere in the conversation, which gives the
tiny backends something learnable.
"""

from __future__ import annotations

import random

from .corpus import Conversation, SummaryRecord, Turn

NAMES = [
    "Amanda", "John", "Hannah", "Larry", "Eric", "Betty", "Sam", "Lucy",
    "Tom", "Kate", "Mark", "Anna", "Paul", "Julia", "Peter", "Emma",
]
FOODS = ["pasta", "pizza", "sushi", "salad", "soup", "burgers", "noodles", "tacos"]
PLACES = ["cinema", "station", "office", "park", "gym", "library", "mall", "cafe"]
TIMES = ["5 pm", "6 pm", "noon", "8 am", "9 pm", "7 pm"]
ITEMS = ["a table", "six chairs", "a vase", "a lamp", "a bike", "a jacket", "new shoes", "a phone"]
PRICES = ["20 euros", "70 euros", "15 dollars", "50 dollars", "100 euros"]
THINGS = ["application", "printer", "laptop", "report", "car", "homework"]
FILLERS = ["ok", "sure", "thanks", "no problem", "see you", "great", "cool", "bye"]


def _late(rng, a, b):
    food = rng.choice(FOODS)
    summary = f"{a} will be late . {b} will order {food} for {a} ."
    turns = [
        (a, "I will be late ."),
        (b, f"ok . should I order {food} for you ?"),
        (a, f"yes please , {food} sounds good ."),
    ]
    return summary, turns


def _meet(rng, a, b):
    place, time = rng.choice(PLACES), rng.choice(TIMES)
    summary = f"{a} and {b} will meet at the {place} at {time} ."
    turns = [
        (a, "are we meeting today ?"),
        (b, f"yes , at the {place} ."),
        (a, "what time ?"),
        (b, f"{time} ."),
    ]
    return summary, turns


def _bought(rng, a, b):
    item, place, price = rng.choice(ITEMS), rng.choice(PLACES), rng.choice(PRICES)
    summary = f"{a} bought {item} at the {place} . {a} paid {price} ."
    turns = [
        (a, f"I went to the {place} today ."),
        (b, "what did you get ?"),
        (a, f"{item} ."),
        (b, "how much was it ?"),
        (a, f"{price} ."),
    ]
    return summary, turns


def _help(rng, a, b):
    thing = rng.choice(THINGS)
    summary = f"{a} needs {b} 's help with the {thing} ."
    turns = [
        (a, f"{b} , I need your help ."),
        (b, "what is wrong ?"),
        (a, f"the {thing} is not working ."),
        (b, f"I will look at the {thing} ."),
    ]
    return summary, turns


SCENARIOS = (_late, _meet, _bought, _help)


def synthetic_records(n: int, seed: int = 0, split: str = "train", prefix: str = "syn") -> list[SummaryRecord]:
    rng = random.Random(seed)
    records = []
    for i in range(n):
        a, b = rng.sample(NAMES, 2)
        summary, turns = rng.choice(SCENARIOS)(rng, a, b)
        speakers = [turns[-1][0], turns[-2][0]]
        for j in range(rng.randint(0, 4)):
            turns.append((speakers[j % 2], rng.choice(FILLERS)))
        rid = f"{prefix}-{split}-{i:05d}"
        conv = Conversation(rid, tuple(Turn(s, t) for s, t in turns))
        records.append(SummaryRecord(rid, summary, conv, split))
    return records
